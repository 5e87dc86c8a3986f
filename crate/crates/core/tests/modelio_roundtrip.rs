mod common;

use common::{fixture_dir, fixture_f32, fixture_model, resnet};
use shiftquant::calibrate::CalibConfig;
use shiftquant::engine::quantize_graph;
use shiftquant::modelio::{
    decode_quantized, encode_model, encode_quantized, load_model, load_quantized, read_tensor,
    save_model, save_quantized, write_tensor,
};
use shiftquant::tensor::AnyTensor;
use shiftquant::{Error, Tensor};

#[test]
fn float_model_save_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    for g in [resnet(3, true, 9), fixture_model()] {
        let (m, b) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        save_model(&g, &m, &b).unwrap();
        let back = load_model(&m, &b).unwrap();
        assert_eq!(back, g);
        assert_eq!(encode_model(&back).unwrap(), encode_model(&g).unwrap());
    }
}

#[test]
fn fixture_blob_is_reproduced_byte_for_byte() {
    let g = fixture_model();
    let (_, blob) = encode_model(&g).unwrap();
    assert_eq!(
        blob,
        std::fs::read(fixture_dir().join("model.bin")).unwrap()
    );
}

#[test]
fn quantized_file_round_trip_and_inference() {
    let g = fixture_model();
    let calib = fixture_f32("calib_x.sqt");
    let (model, _) = quantize_graph(&g, &CalibConfig::new(vec![calib.clone()])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.sqq");
    save_quantized(&model, &path).unwrap();
    let loaded = load_quantized(&path).unwrap();
    assert_eq!(loaded, model);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(encode_quantized(&loaded).unwrap(), bytes);
    assert_eq!(
        encode_quantized(&decode_quantized(&bytes).unwrap()).unwrap(),
        bytes
    );
    assert_eq!(
        loaded.run_int(&calib).unwrap(),
        model.run_int(&calib).unwrap()
    );
}

#[test]
fn tensor_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.sqt");
    let t =
        AnyTensor::I32(Tensor::new(vec![2, 3], vec![1, -2, 3, -4, i32::MAX, i32::MIN]).unwrap());
    write_tensor(&path, &t).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), t);
    let x = fixture_f32("test_x.sqt");
    assert_eq!(x.dims(), &[512, 1, 16, 16]);
}

#[test]
fn missing_files_report_their_path() {
    match load_quantized("/nonexistent/q.sqq") {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("q.sqq")),
        other => panic!("unexpected {other:?}"),
    }
}
