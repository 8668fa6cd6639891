#![no_main]

use fedswitch_core::data::Dataset;
use libfuzzer_sys::fuzz_target;

// First byte picks the class count, second toggles min-max scaling.
fuzz_target!(|data: &[u8]| {
    let [classes, flags, body @ ..] = data else {
        return;
    };
    let num_classes = usize::from(*classes % 16) + 1;
    let scale = flags & 1 == 1;
    let Ok(ds) = Dataset::from_csv_reader(body, num_classes, scale) else {
        return;
    };
    assert!(!ds.is_empty());
    assert!(ds.labels().iter().all(|&l| l < num_classes));
    assert!(ds.inputs().as_slice().iter().all(|v| v.is_finite()));
    if scale {
        assert!(ds
            .inputs()
            .as_slice()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    } else {
        let text = ds.to_csv_string();
        let again = Dataset::from_csv_reader(text.as_bytes(), num_classes, false).unwrap();
        assert_eq!(again, ds);
    }
});
