use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;
use ureq::Agent;

use super::{Endpoint, Service, Transport};
use crate::error::{Error, Result};

/// Connection settings for the JSON-over-HTTP backend.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL per service, e.g. `http://localhost:8001`.
    pub urls: BTreeMap<Service, String>,
    pub timeout: Duration,
    /// Extra attempts after the first on transient failures.
    pub retries: u32,
    /// Delay before the first retry; doubled on each subsequent one.
    pub backoff: Duration,
    /// Maximum concurrent requests per service.
    pub max_in_flight: usize,
    /// Passed through as `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            urls: BTreeMap::new(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_millis(200),
            max_in_flight: 4,
            bearer_token: None,
        }
    }
}

impl HttpConfig {
    /// Read service URLs from `CFSIZE_*_URL` and the token from `CFSIZE_API_TOKEN`.
    pub fn from_env() -> Self {
        let mut config = Self::default();
        for service in Service::ALL {
            if let Ok(url) = std::env::var(service.env_var()) {
                if !url.is_empty() {
                    config.urls.insert(service, url);
                }
            }
        }
        config.bearer_token = std::env::var("CFSIZE_API_TOKEN").ok().filter(|t| !t.is_empty());
        config
    }

    /// Point every service at the same base URL.
    pub fn single(base_url: &str) -> Self {
        let mut config = Self::default();
        for service in Service::ALL {
            config.urls.insert(service, base_url.to_string());
        }
        config
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Done(Value),
    Transient(String),
    Fatal(Error),
}

/// POSTs request bodies to `<base_url>/<endpoint>`.
///
/// Every endpoint is treated as idempotent (responses are a function of the
/// request, including its seed), so transient failures (connection errors,
/// timeouts, 429 and 5xx) are retried with exponential backoff.
pub struct HttpTransport {
    agent: Agent,
    config: HttpConfig,
    gates: BTreeMap<Service, Semaphore>,
}

impl HttpTransport {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        let agent_config = Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build();
        let gates = Service::ALL
            .iter()
            .map(|&s| (s, Semaphore::new(config.max_in_flight)))
            .collect();
        Ok(Self {
            agent: Agent::new_with_config(agent_config),
            config,
            gates,
        })
    }

    fn url(&self, endpoint: Endpoint) -> Result<String> {
        let service = endpoint.service();
        let base = self.config.urls.get(&service).ok_or_else(|| Error::ClientUnavailable {
            service: service.name().to_string(),
            message: format!("no URL configured (set {})", service.env_var()),
        })?;
        Ok(format!("{}{}", base.trim_end_matches('/'), endpoint.path()))
    }

    fn attempt(&self, url: &str, endpoint: Endpoint, payload: &str) -> Attempt {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = &self.config.bearer_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let response = match req.send(payload) {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = response.status().as_u16();
        let body = match response.into_body().read_to_string() {
            Ok(b) => b,
            Err(e) => return Attempt::Transient(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match serde_json::from_str(&body) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal(Error::schema(format!("{} response", endpoint.name()), e)),
            },
            429 | 500..=599 => Attempt::Transient(format!("HTTP {status}")),
            _ => Attempt::Fatal(Error::ClientUnavailable {
                service: endpoint.service().name().to_string(),
                message: format!("HTTP {status}: {}", body.chars().take(200).collect::<String>()),
            }),
        }
    }
}

impl Transport for HttpTransport {
    fn call(&self, endpoint: Endpoint, body: &Value) -> Result<Value> {
        let url = self.url(endpoint)?;
        let payload = serde_json::to_string(body)?;
        let _permit = self.gates[&endpoint.service()].acquire();
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                log::debug!("retrying {url} in {delay:?} after: {last}");
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&url, endpoint, &payload) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(msg) => last = msg,
            }
        }
        Err(Error::ClientUnavailable {
            service: endpoint.service().name().to_string(),
            message: format!("{} attempts failed, last error: {last}", self.config.retries + 1),
        })
    }
}
