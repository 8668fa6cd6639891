#![no_main]

use fedswitch_core::experiment::parse_config_str;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = parse_config_str(text) else {
        return;
    };
    // Anything accepted must survive the resolved-config echo.
    let echoed = cfg.to_toml_string().unwrap();
    assert_eq!(parse_config_str(&echoed).unwrap(), cfg);
});
