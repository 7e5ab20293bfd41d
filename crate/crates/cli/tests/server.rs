//! Environment-server protocol behavior: transparency against the
//! in-process environment, session isolation, per-index batch errors, and
//! malformed-message recovery.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use serde_json::{json, Value};

use slate_rl_cli::config::RunConfig;
use slate_rl_cli::server::spawn;
use slate_rl_cli::tasks::{build_service, TaskContext};

fn test_context() -> TaskContext {
    let mut config = RunConfig::default();
    config.sessions = 10;
    config.catalog_size = 12;
    let dir = std::env::temp_dir().join(format!(
        "slate-rl-server-test-{}-{}",
        std::process::id(),
        rand_suffix()
    ));
    TaskContext::new(config, dir).unwrap()
}

fn rand_suffix() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos()
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        let writer = stream.try_clone().unwrap();
        Self { reader: BufReader::new(stream), writer }
    }

    fn send(&mut self, value: Value) -> Value {
        writeln!(self.writer, "{value}").unwrap();
        self.raw(&value.to_string())
    }

    fn raw(&mut self, _sent: &str) -> Value {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    }

    fn send_text(&mut self, text: &str) -> Value {
        writeln!(self.writer, "{text}").unwrap();
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    }
}

#[test]
fn server_episode_matches_in_process_environment() {
    let ctx = test_context();
    let service = build_service(&ctx, None).unwrap();
    let world = ctx.world().unwrap();
    let catalog = world.catalog.clone();
    let episode_config = ctx.config.episode_config();
    let handle = spawn(service, "127.0.0.1:0").unwrap();

    let mut client = Client::connect(handle.addr);
    let hello = client.send(json!({"type": "hello", "version": 1}));
    assert_eq!(hello["type"], "hello_ack");
    assert_eq!(hello["page_size"], 9);

    let user: Vec<f64> = world.clusters[0].features.clone();
    let seed = 42u64;
    let reset = client.send(json!({
        "type": "reset", "session": "a", "seed": seed, "user_context": user,
    }));
    assert_eq!(reset["type"], "reset_ok");
    assert_eq!(reset["step_index"], 0);
    assert_eq!(reset["mask"].as_array().unwrap().len(), 12);

    // local reference episode with the same seed and actions
    let mut env = slate_rl::SlateEnv::new(episode_config, &catalog, &world).unwrap();
    env.reset(&world.clusters[0].features, seed).unwrap();

    for step in 0..9 {
        let action = env.action_mask().unwrap()[0];
        let local = env.step(action).unwrap();
        let remote = client.send(json!({"type": "step", "session": "a", "action": action.0}));
        assert_eq!(remote["type"], "step_ok", "step {step}: {remote}");
        assert_eq!(remote["reward"].as_f64().unwrap(), local.reward, "step {step} reward");
        assert_eq!(remote["done"].as_bool().unwrap(), local.done, "step {step} done");
        let remote_info: Option<Vec<u8>> =
            serde_json::from_value(remote["info"].clone()).unwrap();
        assert_eq!(remote_info, local.info, "step {step} info");
        assert_eq!(
            remote["step_index"].as_u64().unwrap() as usize,
            local.next_state.step_index(9)
        );
        let remote_chosen: Vec<u32> = serde_json::from_value(remote["chosen"].clone()).unwrap();
        let local_chosen: Vec<u32> =
            local.next_state.chosen_items().iter().map(|i| i.0).collect();
        assert_eq!(remote_chosen, local_chosen);
    }
    handle.shutdown();
}

#[test]
fn sessions_are_isolated_and_batchable() {
    let ctx = test_context();
    let service = build_service(&ctx, None).unwrap();
    let world = ctx.world().unwrap();
    let handle = spawn(service, "127.0.0.1:0").unwrap();
    let user: Vec<f64> = world.clusters[0].features.clone();

    // two concurrent clients using the SAME token never collide
    let mut c1 = Client::connect(handle.addr);
    let mut c2 = Client::connect(handle.addr);
    c1.send(json!({"type": "reset", "session": "tok", "seed": 1, "user_context": user}));
    c2.send(json!({"type": "reset", "session": "tok", "seed": 2, "user_context": user}));
    let r1 = c1.send(json!({"type": "step", "session": "tok", "action": 1}));
    // client 2 still at step 0: stepping the same item must also be legal
    let r2 = c2.send(json!({"type": "step", "session": "tok", "action": 1}));
    assert_eq!(r1["type"], "step_ok");
    assert_eq!(r2["type"], "step_ok");
    assert_eq!(r2["step_index"], 1, "client 2 has its own fresh episode");

    // batch step over two sessions of one client, with one bad action
    c1.send(json!({"type": "reset", "session": "x", "seed": 3, "user_context": user}));
    c1.send(json!({"type": "reset", "session": "y", "seed": 4, "user_context": user}));
    c1.send(json!({"type": "step", "session": "x", "action": 5}));
    let batch = c1.send(json!({
        "type": "batch_step",
        "sessions": ["x", "y", "ghost"],
        "actions": [5, 7, 1],
    }));
    assert_eq!(batch["type"], "batch_ok");
    let results = batch["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    assert!(results[0].get("error").is_some(), "item 5 already placed in session x");
    assert!(results[1].get("error").is_none());
    assert!(results[2]["error"].as_str().unwrap().contains("unknown session"));

    handle.shutdown();
}

#[test]
fn malformed_messages_do_not_kill_the_connection() {
    let ctx = test_context();
    let service = build_service(&ctx, None).unwrap();
    let world = ctx.world().unwrap();
    let handle = spawn(service, "127.0.0.1:0").unwrap();
    let mut client = Client::connect(handle.addr);

    let bad = client.send_text("this is not json");
    assert_eq!(bad["type"], "error");
    let bad = client.send_text("{\"type\": \"no_such_message\"}");
    assert_eq!(bad["type"], "error");
    let bad = client.send(json!({"type": "step", "session": "never-reset", "action": 1}));
    assert_eq!(bad["type"], "error");
    assert!(bad["message"].as_str().unwrap().contains("unknown session"));

    // connection still works afterwards
    let user: Vec<f64> = world.clusters[0].features.clone();
    let ok = client.send(json!({"type": "reset", "session": "s", "seed": 9, "user_context": user}));
    assert_eq!(ok["type"], "reset_ok");
    let closed = client.send(json!({"type": "close", "session": "s"}));
    assert_eq!(closed["type"], "closed");
    let gone = client.send(json!({"type": "step", "session": "s", "action": 1}));
    assert_eq!(gone["type"], "error");

    handle.shutdown();
}

#[test]
fn wrong_protocol_version_and_bad_context_are_rejected() {
    let ctx = test_context();
    let service = build_service(&ctx, None).unwrap();
    let handle = spawn(service, "127.0.0.1:0").unwrap();
    let mut client = Client::connect(handle.addr);

    let hello = client.send(json!({"type": "hello", "version": 99}));
    assert_eq!(hello["type"], "error");

    let reset = client.send(json!({
        "type": "reset", "session": "s", "seed": 1, "user_context": [0.0],
    }));
    assert_eq!(reset["type"], "error");
    assert!(reset["message"].as_str().unwrap().contains("dimension"));

    // sampled user context when none is supplied
    let reset = client.send(json!({"type": "reset", "session": "s", "seed": 1}));
    assert_eq!(reset["type"], "reset_ok");
    assert_eq!(reset["user_context"].as_array().unwrap().len(), 6);

    handle.shutdown();
}
