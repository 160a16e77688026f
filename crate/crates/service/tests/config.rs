use std::collections::HashMap;
use std::path::PathBuf;

use meed_service::config::{Overrides, ENV_BIND, ENV_CHECKPOINT};
use meed_service::ServiceConfig;

#[test]
fn defaults_validate_and_use_the_desk_beam() {
    let c = ServiceConfig::default();
    c.validate().unwrap();
    assert_eq!(c.decode.beam_width, 8);
    assert_eq!(c.decode.max_len, 30);
}

#[test]
fn toml_sets_nested_decode_fields() {
    let c = ServiceConfig::from_toml(
        r#"
        checkpoint = "m.ckpt"
        bind = "0.0.0.0:9000"
        idle_timeout_secs = 10
        [decode]
        beam_width = 256
        "#,
    )
    .unwrap();
    assert_eq!(c.checkpoint, PathBuf::from("m.ckpt"));
    assert_eq!(c.decode.beam_width, 256);
    assert_eq!(c.decode.max_len, 30);
    assert_eq!(c.idle_timeout_secs, 10);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ServiceConfig::from_toml("bnid = \"x\"").is_err());
}

#[test]
fn flags_beat_env_which_beats_file() {
    let file = ServiceConfig::from_toml("bind = \"127.0.0.1:1000\"\ncheckpoint = \"file.ckpt\"").unwrap();
    let env: HashMap<&str, &str> = [(ENV_BIND, "127.0.0.1:2000"), (ENV_CHECKPOINT, "env.ckpt")].into();
    let lookup = |k: &str| env.get(k).map(|v| v.to_string());

    let c = file.clone().layered(lookup, &Overrides::default());
    assert_eq!(c.bind, "127.0.0.1:2000");
    assert_eq!(c.checkpoint, PathBuf::from("env.ckpt"));

    let flags = Overrides {
        bind: Some("127.0.0.1:3000".into()),
        ..Overrides::default()
    };
    let c = file.clone().layered(lookup, &flags);
    assert_eq!(c.bind, "127.0.0.1:3000");
    assert_eq!(c.checkpoint, PathBuf::from("env.ckpt"));

    let c = file.layered(|_| None, &Overrides::default());
    assert_eq!(c.bind, "127.0.0.1:1000");
}

#[test]
fn invalid_values_fail_validation() {
    let bad = [
        ServiceConfig {
            idle_timeout_secs: 0,
            ..ServiceConfig::default()
        },
        ServiceConfig {
            request_timeout_ms: 0,
            ..ServiceConfig::default()
        },
        ServiceConfig {
            max_sessions: 0,
            ..ServiceConfig::default()
        },
        ServiceConfig {
            bind: "localhost:99999".into(),
            ..ServiceConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let mut c = ServiceConfig::default();
    c.decode.beam_width = 0;
    assert!(c.validate().is_err());
}
