use t2l_core::generator::{GeneratorConfig, GeneratorState};
use t2l_core::image::Image;
use t2l_core::trainer;
use t2l_core::Error;

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        encoder_depth: 3,
        base_channels: 8,
        ..GeneratorConfig::default()
    }
}

fn probe() -> Image {
    Image::from_fn(16, 16, |y, x| [y as f32 / 16.0, x as f32 / 16.0, 0.5]).unwrap()
}

#[test]
fn restored_generator_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.safetensors");
    let mut state = GeneratorState::build(&tiny(), 11).unwrap();
    state.step = 42;
    trainer::checkpoint(&state, None, &path).unwrap();
    let back = trainer::restore(&path, Some(&tiny())).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.config(), state.config());
    let (a, b) = (state.forward(&probe()).unwrap(), back.forward(&probe()).unwrap());
    assert_eq!(a.color().planar(), b.color().planar());
    assert_eq!(a.alpha().values(), b.alpha().values());
}

#[test]
fn config_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.safetensors");
    trainer::checkpoint(&GeneratorState::build(&tiny(), 1).unwrap(), None, &path).unwrap();
    let other = GeneratorConfig {
        base_channels: 16,
        ..tiny()
    };
    let err = trainer::restore(&path, Some(&other)).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn flipped_payload_byte_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.safetensors");
    trainer::checkpoint(&GeneratorState::build(&tiny(), 1).unwrap(), None, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x55;
    std::fs::write(&path, bytes).unwrap();
    let err = trainer::restore(&path, None).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn truncated_file_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.safetensors");
    trainer::checkpoint(&GeneratorState::build(&tiny(), 1).unwrap(), None, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = trainer::restore(&path, None).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
