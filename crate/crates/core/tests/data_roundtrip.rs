use iaunet::checkpoint::Checkpoint;
use iaunet::config::RunConfig;
use iaunet::data::{
    generate_dataset, load_dataset, read_pgm, read_ppm, save_dataset, write_pgm, write_ppm, RgbImage, SceneSpec,
};
use iaunet::mask::BinaryMask;
use iaunet::model::{Iaunet, ModelConfig};
use iaunet::Error;

#[test]
fn dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { seed: 11, multi_class: true, max_instances: 3, ..Default::default() };
    let samples = generate_dataset(&spec, 3).unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.record, b.record);
        // pixels are quantized to 8 bits at generation time
        assert_eq!(a.image, b.image);
    }
}

#[test]
fn broken_annotation_names_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&SceneSpec { seed: 2, ..Default::default() }, 2).unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let ann = dir.path().join("annotations/img_0000.json");
    let text = std::fs::read_to_string(&ann).unwrap().replace("\"height\": 64", "\"height\": 65");
    std::fs::write(&ann, text).unwrap();
    std::fs::remove_file(dir.path().join("annotations/img_0001.json")).unwrap();
    let Err(Error::Validation(p)) = load_dataset(dir.path()) else { panic!("expected validation error") };
    assert_eq!(p.len(), 2, "{p:?}");
    assert!(p.iter().any(|m| m.contains("declared size 65x64")));
    assert!(p.iter().any(|m| m.contains("img_0001: missing annotation")));
}

#[test]
fn netpbm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::new(3, 5, (0..45).map(|i| f64::from(i * 5) / 255.0).collect()).unwrap();
    write_ppm(&dir.path().join("a.ppm"), &img).unwrap();
    assert_eq!(read_ppm(&dir.path().join("a.ppm")).unwrap(), img);
    let mask = BinaryMask::from_fn(4, 7, |y, x| (x + y) % 3 == 0);
    write_pgm(&dir.path().join("m.pgm"), &mask).unwrap();
    assert_eq!(read_pgm(&dir.path().join("m.pgm")).unwrap(), mask);
    assert!(read_pgm(&dir.path().join("a.ppm")).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let model = Iaunet::new(ModelConfig::tiny(), 4).unwrap();
    let ck = Checkpoint::capture(&model, 12);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.header.step, 12);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let mut cfg = RunConfig { seed: 99, ..Default::default() };
    cfg.model.use_coord_conv = false;
    cfg.data.dir = Some(dir.path().join("data"));
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}
