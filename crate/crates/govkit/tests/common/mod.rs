#![allow(dead_code)]

use govkit::datadir::sandbox_for;
use govkit::node::Node;
use govkit_core::bootstrap::bootstrap_community;
use govkit_core::engine::{Command, SubmitRequest};
use govkit_core::ids::{ActionId, UserId};
use govkit_core::model::{Community, User, VoteValue};
use govkit_core::platform::{sandbox_descriptor, SandboxPlatform};
use govkit_core::time::Timestamp;
use serde_json::{json, Map, Value as Json};

pub const T0: Timestamp = Timestamp::from_millis(1_704_067_200_000);

pub fn community(n: usize) -> Community {
    let members = (1..=n)
        .map(|i| {
            let mut u = User::new(format!("u{i}"));
            u.platform_handle = format!("u{i}");
            u
        })
        .collect();
    bootstrap_community("Test Commons", members, 3, &sandbox_descriptor(), T0).unwrap()
}

pub fn node(dir: &std::path::Path, n: usize) -> Node {
    let c = community(n);
    let p = sandbox_for(&c, &[]);
    let mut node = Node::create(dir, c, Box::new(p), T0).unwrap();
    node.log_mut().set_sync(false);
    node
}

pub fn reopen(dir: &std::path::Path) -> Node {
    Node::open(dir, |_| Ok(Box::new(SandboxPlatform::default()))).unwrap().0
}

pub fn obj(v: Json) -> Map<String, Json> {
    match v {
        Json::Object(m) => m,
        _ => panic!("not an object"),
    }
}

pub fn post(user: &str, text: &str) -> Command {
    Command::PlatformEvent {
        event_id: None,
        actor_handle: user.into(),
        action_type: "post_message".into(),
        payload: obj(json!({"channel": "general", "text": text})),
    }
}

pub fn propose_role(user: &str, name: &str) -> Command {
    Command::Submit(SubmitRequest {
        initiator: UserId::from(user),
        action_type: "RoleAdd".into(),
        payload: obj(json!({"name": name})),
        datetime_trigger: None,
        bundle: None,
    })
}

pub fn yes(user: &str, action: &str) -> Command {
    Command::Vote { voter: UserId::from(user), action: ActionId::from(action), value: VoteValue::Boolean(true) }
}

pub fn state_bytes(n: &Node) -> (Vec<u8>, Vec<u8>) {
    (
        serde_json::to_vec(&n.engine().canonical_state()).unwrap(),
        serde_json::to_vec(&n.engine().platform().state()).unwrap(),
    )
}
