use meshlift::config::{apply, ModelConfig};
use meshlift::datagen::dataset::split_by_name;
use meshlift::datagen::{generate_split, DataConfig};
use meshlift::geometry::project;
use meshlift::parallel::Exec;
use meshlift::procrustes::{aligned_vertex_error, err_align};
use meshlift::train::train;
use meshlift::Tape;

fn smoke() -> (ModelConfig, DataConfig) {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.cfg")).unwrap();
    let (mut m, mut d) = (ModelConfig::default(), DataConfig::default());
    apply(&text, &mut [&mut m, &mut d]).unwrap();
    (m, d)
}

#[test]
fn generate_train_predict() {
    let (config, data) = smoke();
    let train_set = generate_split(&data, &split_by_name("train").unwrap(), data.train_count, Exec::Auto).unwrap();
    let test = generate_split(&data, &split_by_name("test_known").unwrap(), 2, Exec::Auto).unwrap();
    assert_eq!(train_set.len(), 12);
    for s in &train_set {
        assert_eq!(s.mesh2d, project(&s.camera, &s.mesh3d).unwrap());
    }

    let outcome = train(&config, &train_set, Exec::Auto, |_| {}).unwrap();
    assert_eq!(outcome.metrics.len(), config.total_epochs());
    let model = outcome.checkpoint.model().unwrap();
    for s in &test {
        let p = model.predict(&s.image_tensor(), &s.camera).unwrap();
        assert_eq!(p.mesh3d.n(), 3);
        assert!(p.mesh3d.vertices().iter().all(|v| v[2] > 0.0));
        let e = aligned_vertex_error(p.mesh3d.vertices(), s.mesh3d.vertices()).unwrap();
        assert!(e.is_finite() && e >= 0.0);
    }
}

#[test]
fn tape_err_align_matches_the_plain_function() {
    let (_, mut data) = smoke();
    data.n = 5;
    let s = generate_split(&data, &split_by_name("test_new").unwrap(), 2, Exec::Sequential).unwrap();
    let (a, b) = (&s[0].mesh3d, &s[1].mesh3d);
    let tape = Tape::new();
    let va = tape.leaf(a.to_tensor(), true);
    let vb = tape.constant(b.to_tensor());
    let e = tape.err_align(va, vb).unwrap();
    let plain = err_align(a, b).unwrap();
    assert!((tape.value(e).data()[0] - plain).abs() < 1e-12);
}
