use gazekit::profiles::{Profile, TrainConfig};
use gazekit::synthgaze::generate_dataset;
use gazekit::training::{train_joint, SplitSel, TrainData, TrainIo};

#[test]
#[ignore]
fn time_joint_steps() {
    let dir = tempfile::tempdir().unwrap();
    let p = Profile::desk();
    let m = generate_dataset(dir.path(), 10, 10, 1, &p).unwrap();
    let data = TrainData::load(&m, dir.path(), SplitSel::All).unwrap();
    let cfg = TrainConfig {
        max_steps: 5,
        warm_steps: 5,
        batch: 16,
        ..TrainConfig::default()
    };
    let (_, summary) = train_joint(&cfg, &data, None, &TrainIo::default()).unwrap();
    for r in &summary.records {
        println!(
            "step {} wall {:.0} ms  lx_re {:.4} ly_re {:.4} advxd {:.3}",
            r.step, r.wall_ms, r.lx_re, r.ly_re, r.adv_x_d
        );
    }
}
