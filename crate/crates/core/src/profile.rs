//! The shared profile-generation prompt and per-user profiles.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::UserRecord;
use crate::gateway::{GatewayError, Llm};
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptOrigin {
    Seed,
    Optimizer,
}

/// One version of the profile-generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptState {
    pub text: String,
    pub version: u32,
    pub parent_version: Option<u32>,
    pub created_by: PromptOrigin,
    pub note: String,
}

impl PromptState {
    pub fn seed(text: impl Into<String>, note: impl Into<String>) -> Self {
        PromptState {
            text: text.into(),
            version: 0,
            parent_version: None,
            created_by: PromptOrigin::Seed,
            note: note.into(),
        }
    }

    /// The next version in the lineage.
    pub fn child(&self, text: impl Into<String>, note: impl Into<String>) -> Self {
        PromptState {
            text: text.into(),
            version: self.version + 1,
            parent_version: Some(self.version),
            created_by: PromptOrigin::Optimizer,
            note: note.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("unknown prompt template {0:?}")]
    MissingTemplate(String),
    #[error("user {0} has an empty history")]
    EmptyHistory(String),
    #[error("model returned an empty profile for user {0}")]
    EmptyResponse(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("prompt lineage is broken at version {0}")]
    BrokenLineage(u32),
}

/// Built-in templates by name.
pub fn builtin_template(name: &str) -> Option<&'static str> {
    match name {
        "default" => Some(prompts::DEFAULT_PROFILE_PROMPT),
        _ => None,
    }
}

/// Version-0 prompt from a built-in template name. Loading from a file is
/// done by the caller, which then uses [`PromptState::seed`].
pub fn seed_prompt(template_name: &str) -> Result<PromptState, ProfileError> {
    builtin_template(template_name)
        .map(|text| PromptState::seed(text, alloc::format!("built-in template {template_name}")))
        .ok_or_else(|| ProfileError::MissingTemplate(template_name.to_string()))
}

/// Checks that versions form one chain rooted at a version-0 seed.
pub fn check_lineage(lineage: &[PromptState]) -> Result<(), ProfileError> {
    for (i, p) in lineage.iter().enumerate() {
        let ok = if i == 0 {
            p.version == 0 && p.parent_version.is_none() && p.created_by == PromptOrigin::Seed
        } else {
            let prev = &lineage[i - 1];
            p.version > prev.version && p.parent_version == Some(prev.version)
        };
        if !ok {
            return Err(ProfileError::BrokenLineage(p.version));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub text: String,
    pub prompt_version: u32,
}

fn profile_from(user: &UserRecord, prompt: &PromptState, text: String) -> Result<UserProfile, ProfileError> {
    if text.trim().is_empty() {
        return Err(ProfileError::EmptyResponse(user.user_id.clone()));
    }
    Ok(UserProfile {
        user_id: user.user_id.clone(),
        text: text.trim().to_string(),
        prompt_version: prompt.version,
    })
}

/// One profile call: the prompt as the system message, the numbered history
/// as the user message.
pub fn generate_profile(
    user: &UserRecord,
    prompt: &PromptState,
    llm: &(impl Llm + ?Sized),
) -> Result<UserProfile, ProfileError> {
    if user.history.is_empty() {
        return Err(ProfileError::EmptyHistory(user.user_id.clone()));
    }
    let response = llm.complete(&prompts::profile_request(&prompt.text, &user.history))?;
    profile_from(user, prompt, response.text)
}

/// Profiles for several users through one `complete_all` round, results in
/// input order.
pub fn generate_profiles(
    users: &[&UserRecord],
    prompt: &PromptState,
    llm: &(impl Llm + ?Sized),
) -> Vec<Result<UserProfile, ProfileError>> {
    let mut out: Vec<Option<Result<UserProfile, ProfileError>>> = Vec::with_capacity(users.len());
    let mut requests = Vec::new();
    for user in users {
        if user.history.is_empty() {
            out.push(Some(Err(ProfileError::EmptyHistory(user.user_id.clone()))));
        } else {
            out.push(None);
            requests.push(prompts::profile_request(&prompt.text, &user.history));
        }
    }
    let mut responses = llm.complete_all(&requests).into_iter();
    users
        .iter()
        .zip(out)
        .map(|(user, slot)| match slot {
            Some(err) => err,
            None => {
                let response = responses.next().expect("one response per request")?;
                profile_from(user, prompt, response.text)
            }
        })
        .collect()
}
