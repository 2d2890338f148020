use oncall_core::gateway::BackendKind;
use oncall_service::config::{ConfigError, FetchMode, ServiceConfig};

fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn defaults_need_no_file() {
    let cfg = ServiceConfig::load(None, env(&[])).unwrap();
    assert_eq!(cfg.dedup.theta, 0.7);
    assert_eq!(cfg.server.review_parallelism, 2);
    assert_eq!(cfg.engine.quiet_window_ms, 3000);
    assert!(!cfg.engine_config().review_inline);
}

#[test]
fn file_values_then_env_overrides() {
    let toml = r#"
        [server]
        listen = "0.0.0.0:9000"
        review_parallelism = 0

        [dedup]
        theta = 0.9

        [engine]
        k_per_path = 3

        [fetch]
        mode = "fixture"
        documents = "docs.json"
    "#;
    let cfg = ServiceConfig::from_toml(
        toml,
        env(&[
            ("ONCALL_DEDUP__THETA", "0.4"),
            ("ONCALL_ENGINE__SELF_IMPROVE", "false"),
            ("ONCALL_PROVIDER__MODEL_NAME", "local-model"),
            ("ONCALL_PROVIDER__BACKEND", "remote"),
            ("ONCALL_PROVIDER__ENDPOINT", "http://localhost:8000/v1"),
            ("ONCALL_API_KEY", "secret"),
            ("HOME", "/root"),
        ]),
    )
    .unwrap();
    assert_eq!(cfg.server.listen, "0.0.0.0:9000");
    assert_eq!(cfg.dedup.theta, 0.4);
    assert_eq!(cfg.engine.k_per_path, 3);
    assert!(!cfg.engine.self_improve);
    assert_eq!(cfg.provider.model_name, "local-model");
    assert_eq!(cfg.provider.backend, BackendKind::Remote);
    assert_eq!(cfg.fetch.mode, FetchMode::Fixture);
    let engine = cfg.engine_config();
    assert_eq!(engine.dedup.theta, 0.4);
    assert!(engine.review_inline);
}

#[test]
fn bad_configs_are_rejected() {
    let cases = [
        ("[dedup]\ntheta = 1.5", vec![]),
        ("[engine.dedup]\ntheta = 0.5", vec![]),
        ("[server]\nlisten = \"nowhere\"", vec![]),
        ("[server]\nunknown = 1", vec![]),
        ("[fetch]\nmode = \"fixture\"", vec![]),
        ("[provider]\nbackend = \"remote\"", vec![]),
        ("", env(&[("ONCALL_DEDUP", "0.3")])),
        ("", env(&[("ONCALL_DEDUP__THETA", "high")])),
        ("[server\n", vec![]),
    ];
    for (toml, vars) in cases {
        assert!(ServiceConfig::from_toml(toml, vars).is_err(), "accepted: {toml}");
    }
    assert!(matches!(ServiceConfig::from_toml("[engine.dedup]\ntheta = 0.5", env(&[])), Err(ConfigError::Invalid(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let err = ServiceConfig::load(Some(std::path::Path::new("/no/such/oncall.toml")), env(&[])).unwrap_err();
    assert!(matches!(err, ConfigError::Io { .. }));
}
