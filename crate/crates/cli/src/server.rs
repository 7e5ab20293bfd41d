//! Vectorized environment server: newline-delimited JSON over TCP.
//!
//! Each connection gets its own session table, so concurrent clients are
//! isolated by construction. A session is created by `reset` (the client
//! chooses the token), advanced by `step`, and many sessions can be
//! advanced at once with `batch_step`, which reports per-index errors
//! without aborting the rest. Malformed messages produce an `error`
//! response and leave the connection open.
//!
//! Seeding matches the in-process environment exactly: a seeded episode
//! driven through the server step-for-step equals the same episode run
//! against [`slate_rl::SlateEnv`] locally.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use slate_rl::catalog::{Catalog, ItemId};
use slate_rl::env::{self, EpisodeConfig, SlateState, UserResponseModel};
use slate_rl::policy::UserSampler;
use slate_rl::rng::stream_rng;
use slate_rl::synth::WorldSpec;

pub const PROTOCOL_VERSION: u32 = 1;

/// Everything a server needs to run episodes.
pub struct EnvService {
    pub config: EpisodeConfig,
    pub catalog: Arc<Catalog>,
    pub model: Arc<dyn UserResponseModel + Send + Sync>,
    /// User population for `reset` without an explicit context.
    pub world: Arc<WorldSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Request {
    Hello { version: u32 },
    Reset { session: String, seed: u64, user_context: Option<Vec<f64>> },
    Step { session: String, action: u32 },
    BatchStep { sessions: Vec<String>, actions: Vec<u32> },
    Close { session: String },
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Response {
    HelloAck {
        version: u32,
        page_size: usize,
        row_len: usize,
        max_pages: usize,
        gamma: f64,
        catalog_size: usize,
    },
    ResetOk {
        session: String,
        user_context: Vec<f64>,
        step_index: usize,
        mask: Vec<u32>,
    },
    StepOk {
        session: String,
        #[serde(flatten)]
        outcome: StepOutcome,
    },
    BatchOk {
        results: Vec<BatchResult>,
    },
    Closed {
        session: String,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum BatchResult {
    Ok(StepOutcome),
    Err { error: String },
}

#[derive(Debug, Serialize)]
struct StepOutcome {
    reward: f64,
    done: bool,
    info: Option<Vec<u8>>,
    page_index: usize,
    step_index: usize,
    chosen: Vec<u32>,
    mask: Vec<u32>,
}

struct Session {
    state: SlateState,
    rng: slate_rl::rng::ChaCha8Rng,
}

struct Connection<'a> {
    service: &'a EnvService,
    sessions: HashMap<String, Session>,
}

impl Connection<'_> {
    fn handle(&mut self, line: &str) -> Response {
        let request: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return Response::Error { message: format!("malformed message: {e}") },
        };
        match request {
            Request::Hello { version } => {
                if version != PROTOCOL_VERSION {
                    return Response::Error {
                        message: format!(
                            "protocol version {version} unsupported, server speaks {PROTOCOL_VERSION}"
                        ),
                    };
                }
                Response::HelloAck {
                    version: PROTOCOL_VERSION,
                    page_size: self.service.config.page_size,
                    row_len: self.service.config.row_len,
                    max_pages: self.service.config.max_pages,
                    gamma: self.service.config.gamma,
                    catalog_size: self.service.catalog.len(),
                }
            }
            Request::Reset { session, seed, user_context } => self.reset(session, seed, user_context),
            Request::Step { session, action } => match self.step(&session, action) {
                Ok(outcome) => Response::StepOk { session, outcome },
                Err(message) => Response::Error { message },
            },
            Request::BatchStep { sessions, actions } => {
                if sessions.len() != actions.len() {
                    return Response::Error {
                        message: format!(
                            "{} sessions vs {} actions",
                            sessions.len(),
                            actions.len()
                        ),
                    };
                }
                let results = sessions
                    .iter()
                    .zip(actions)
                    .map(|(session, action)| match self.step(session, action) {
                        Ok(outcome) => BatchResult::Ok(outcome),
                        Err(error) => BatchResult::Err { error },
                    })
                    .collect();
                Response::BatchOk { results }
            }
            Request::Close { session } => {
                self.sessions.remove(&session);
                Response::Closed { session }
            }
        }
    }

    fn reset(&mut self, session: String, seed: u64, user_context: Option<Vec<f64>>) -> Response {
        // single per-episode stream, identical to the in-process env: an
        // explicit context leaves the stream untouched before stepping
        let rng = stream_rng(seed, "episode", 0);
        let user = match user_context {
            Some(user) => user,
            None => {
                let mut user_rng = stream_rng(seed, "user", 0);
                self.service.world.sample_user(&mut user_rng)
            }
        };
        if user.len() != self.service.model.user_dim() {
            return Response::Error {
                message: format!(
                    "user context has dimension {}, model expects {}",
                    user.len(),
                    self.service.model.user_dim()
                ),
            };
        }
        let state = SlateState::initial(user.clone());
        let mask = self.mask(&state);
        let step_index = state.step_index(self.service.config.page_size);
        // replace any previous session under this token
        self.sessions.insert(session.clone(), Session { state, rng });
        Response::ResetOk { session, user_context: user, step_index, mask }
    }

    fn mask(&self, state: &SlateState) -> Vec<u32> {
        env::action_mask(state, &self.service.catalog, &self.service.config)
            .into_iter()
            .map(|id| id.0)
            .collect()
    }

    fn step(&mut self, token: &str, action: u32) -> Result<StepOutcome, String> {
        let service = self.service;
        let session = self
            .sessions
            .get_mut(token)
            .ok_or_else(|| format!("unknown session token {token:?}"))?;
        let result = env::step(
            &session.state,
            ItemId(action),
            &service.config,
            &service.catalog,
            service.model.as_ref(),
            &mut session.rng,
        )
        .map_err(|e| e.to_string())?;
        session.state = result.next_state.clone();
        let state = &session.state;
        let mask = env::action_mask(state, &service.catalog, &service.config)
            .into_iter()
            .map(|id| id.0)
            .collect();
        Ok(StepOutcome {
            reward: result.reward,
            done: result.done,
            info: result.info,
            page_index: state.page_index(),
            step_index: state.step_index(service.config.page_size),
            chosen: state.chosen_items().iter().map(|id| id.0).collect(),
            mask,
        })
    }
}

fn serve_connection(service: &EnvService, stream: TcpStream, shutdown: &AtomicBool) {
    let _ = stream.set_read_timeout(Some(Duration::from_millis(500)));
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    let mut connection = Connection { service, sessions: HashMap::new() };
    let mut line = String::new();
    loop {
        if shutdown.load(Ordering::Relaxed) {
            return;
        }
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => return, // client closed
            Ok(_) => {
                let trimmed = line.trim_end();
                if trimmed.is_empty() {
                    continue;
                }
                let response = connection.handle(trimmed);
                let payload = serde_json::to_string(&response)
                    .unwrap_or_else(|e| format!("{{\"type\":\"error\",\"message\":\"{e}\"}}"));
                if writeln!(writer, "{payload}").is_err() {
                    return;
                }
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => return,
        }
    }
}

/// A running server; dropping the handle does not stop it, call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    pub addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

/// Bind and serve in background threads; returns once the listener is up.
pub fn spawn(service: EnvService, bind: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let shutdown_accept = Arc::clone(&shutdown);
    let service = Arc::new(service);

    let accept_thread = std::thread::spawn(move || {
        let mut workers = Vec::new();
        loop {
            if shutdown_accept.load(Ordering::Relaxed) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let service = Arc::clone(&service);
                    let shutdown = Arc::clone(&shutdown_accept);
                    workers.push(std::thread::spawn(move || {
                        serve_connection(&service, stream, &shutdown);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(25));
                }
                Err(_) => break,
            }
        }
        for worker in workers {
            let _ = worker.join();
        }
    });

    Ok(ServerHandle { addr, shutdown, accept_thread: Some(accept_thread) })
}

static SIGNAL_SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    SIGNAL_SHUTDOWN.store(true, Ordering::Relaxed);
}

/// Serve until SIGINT/SIGTERM, then drain connections and return.
pub fn run_blocking(service: EnvService, bind: &str) -> Result<()> {
    unsafe {
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
    }
    let handle = spawn(service, bind)?;
    println!("env server listening on {}", handle.addr);
    while !SIGNAL_SHUTDOWN.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(100));
    }
    handle.shutdown();
    Ok(())
}
