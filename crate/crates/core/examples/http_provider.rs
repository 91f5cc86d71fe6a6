//! The HTTP chat client against an in-process transport: one 503, then a
//! reply. The mock clock records the backoff instead of sleeping.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use kpt::providers::http::{HttpChat, HttpEndpoint, HttpRequest, HttpResponse, Transport, TransportError};
use kpt::providers::{ChatProvider, ChatRequest, MockClock, ProviderConfig};

#[derive(Default)]
struct Flaky {
    calls: AtomicUsize,
}

impl Transport for Flaky {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        println!("-> {:?} {} {}", request.method, request.url, request.body.as_deref().unwrap_or(""));
        if n == 0 {
            return Ok(HttpResponse { status: 503, body: "busy".into() });
        }
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"Patient: hi\nTherapist: hello"}}]}"#;
        Ok(HttpResponse { status: 200, body: body.into() })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = ProviderConfig::new("https://llm.example/v1/chat/completions");
    config.model_id = "demo-model".into();
    let clock = Arc::new(MockClock::new());
    let endpoint = HttpEndpoint::with_token(config, Arc::new(Flaky::default()), clock.clone(), Some("secret".into()));
    let chat = HttpChat::new(endpoint);

    let reply = chat.chat(&ChatRequest::user("Rewrite this dialogue.").with_stop("\nTherapist:"))?;
    println!("\nreply after stop sequences: {reply:?}");
    println!("backoff waits: {:?}", clock.sleeps());
    Ok(())
}
