use std::path::Path;

use sela_cli::config::RunConfig;

#[test]
fn shipped_desk_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    assert_eq!(RunConfig::read(&path).unwrap(), RunConfig::desk());
}
