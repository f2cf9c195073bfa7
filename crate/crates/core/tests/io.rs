use pcc::checkpoint::Checkpoint;
use pcc::config::RunConfig;
use pcc::data::{gen_dataset, load_dataset, write_dataset};
use pcc::io::{
    decode_ply, decode_xyz, encode_ply, encode_xyz, read_cloud_auto, write_cloud, CloudFormat,
};
use pcc::train::{TrainConfig, TrainState};
use pcc::{ModelConfig, PointCloud};
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        any::<f32>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0f32),
        Just(-0.0f32),
        Just(f32::MIN_POSITIVE),
        Just(f32::MAX),
    ]
}

fn cloud() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(finite_f32()), 1..200)
        .prop_map(|pts| PointCloud::new(pts).unwrap())
}

fn bits(pc: &PointCloud) -> Vec<[u32; 3]> {
    pc.points().iter().map(|p| p.map(f32::to_bits)).collect()
}

proptest! {
    #[test]
    fn ply_round_trip_is_bitwise(pc in cloud()) {
        prop_assert_eq!(bits(&decode_ply(&encode_ply(&pc)).unwrap()), bits(&pc));
    }

    #[test]
    fn xyz_round_trip_is_value_exact(pc in cloud()) {
        prop_assert_eq!(decode_xyz(&encode_xyz(&pc)).unwrap(), pc);
    }

    #[test]
    fn config_render_parse_round_trip(tokens in 1usize..512, lr in 1e-6f64..1.0, steps in 1u64..100_000,
                                      guide in any::<bool>(), bound in 1e-3f64..2.0) {
        let mut cfg = RunConfig::default();
        cfg.model.tokens = tokens;
        cfg.model.template_guide = guide;
        cfg.model.fold_bound = bound;
        cfg.train.base_lr = lr;
        cfg.train.total_steps = steps;
        prop_assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}

#[test]
fn files_round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let pc = PointCloud::new(vec![[0.1, -2.5e-8, 3.0e7], [1.0, 2.0, 3.0]]).unwrap();
    for format in [CloudFormat::XyzAscii, CloudFormat::PlyBinaryLe] {
        let path = dir.path().join(format!("c.{}", format.extension()));
        write_cloud(&pc, &path, format).unwrap();
        assert_eq!(bits(&read_cloud_auto(&path).unwrap()), bits(&pc));
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = gen_dataset(&["box", "cone"], 2, 64, 128, 3).unwrap();
    write_dataset(dir.path(), &pairs).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), pairs);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut state = TrainState::new(ModelConfig::tiny(), TrainConfig::default()).unwrap();
    let pairs = gen_dataset(&["sphere"], 1, 64, 64, 0).unwrap();
    state.train_step(&pairs).unwrap();
    let bytes = Checkpoint::from_state(&state).to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let restored = back.train_state().unwrap();
    assert_eq!(restored.step, 1);
    assert_eq!(restored.adam, state.adam);
    for ((na, a), (nb, b)) in restored.model.params.iter().zip(state.model.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
}
