//! Concurrent `complete_all` on top of the core gateway.

use std::thread;

use agp_core::gateway::{ChatBackend, ChatRequest, ChatResponse, Gateway, GatewayError, LedgerSnapshot, Llm};

/// A [`Gateway`] that answers `complete_all` with up to `parallelism` calls
/// in flight. Results keep request order.
#[derive(Debug)]
pub struct ParallelGateway<B> {
    inner: Gateway<B>,
    parallelism: usize,
}

impl<B: ChatBackend + Sync> ParallelGateway<B> {
    pub fn new(backend: B, parallelism: usize) -> Self {
        ParallelGateway {
            inner: Gateway::new(backend),
            parallelism: parallelism.max(1),
        }
    }

    pub fn gateway(&self) -> &Gateway<B> {
        &self.inner
    }
}

impl<B: ChatBackend + Sync> Llm for ParallelGateway<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.inner.complete(request)
    }

    fn complete_all(&self, requests: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        if self.parallelism == 1 || requests.len() < 2 {
            return self.inner.complete_all(requests);
        }
        let chunk = requests.len().div_ceil(self.parallelism);
        thread::scope(|s| {
            let handles: Vec<_> = requests
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| self.inner.complete(r)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gateway worker panicked"))
                .collect()
        })
    }

    fn ledger(&self) -> LedgerSnapshot {
        self.inner.ledger()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use agp_core::Purpose;

    struct Echo;

    impl ChatBackend for Echo {
        fn send(&self, r: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            Ok(ChatResponse::text(r.user()))
        }
    }

    #[test]
    fn keeps_request_order() {
        let gw = ParallelGateway::new(Echo, 3);
        let reqs: Vec<_> = (0..10)
            .map(|i| ChatRequest::new(Purpose::Loss, "s", format!("{i}")))
            .collect();
        let out: Vec<String> = gw.complete_all(&reqs).into_iter().map(|r| r.unwrap().text).collect();
        assert_eq!(out, (0..10).map(|i| i.to_string()).collect::<Vec<_>>());
        assert_eq!(gw.ledger().get(Purpose::Loss), 10);
    }
}
