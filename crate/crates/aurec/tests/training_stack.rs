//! Trainer contract tests: update schedule, gradient isolation, checkpoint
//! resume, and the loss bookkeeping that feeds the metric log.

use aurec::config::{RunConfig, SyntheticConfig};
use aurec::data::build_dataset;
use aurec::trainer::Trainer;

fn tiny_run(seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model.au_count = 4;
    run.model.image_size = 96;
    run.model.width = 0.125;
    run.model.embed_dim = 16;
    run.model.heads = 2;
    run.data.synthetic = SyntheticConfig {
        subjects: 2,
        samples_per_subject: 4,
        unlabeled_fraction: 0.5,
        ..SyntheticConfig::default()
    };
    run.train.seed = seed;
    run.train.batch_size = 2;
    run.train.iterations = 3;
    run.train.eval_every = 0;
    run
}

#[test]
fn step_schedule_and_isolation() {
    let run = tiny_run(11);
    let samples = build_dataset(&run, run.train.seed).unwrap();
    let mut tr = Trainer::<f32>::new(run, samples, Vec::new()).unwrap();
    tr.check_isolation = true;
    for i in 0..3 {
        let r = tr.step().unwrap();
        assert_eq!(r.iter, i);
        assert_eq!(r.backbone_updates, 2, "semi step + joint step");
        assert_eq!(r.d_updates, 1);
        assert_eq!(r.c_updates, 1);
        assert_eq!(r.g_updates, 1);
        assert_eq!(r.f_updates, 1);
        assert!(r.isolation_ok, "iteration {i} leaked gradients");
        assert!(!r.all_masked);
        for (name, v) in [
            ("L_semi", r.l_semi),
            ("L_Sup", r.l_sup),
            ("L_D", r.l_d),
            ("L_G", r.l_g),
            ("L_F", r.l_f),
        ] {
            assert!(v.is_finite(), "{name} not finite at iter {i}");
            assert!(v != 0.0, "{name} unexpectedly zero at iter {i}");
        }
    }
}

#[test]
fn disabled_branches_do_not_update() {
    let mut run = tiny_run(12);
    run.train.enable_roii = false;
    run.train.enable_flow = false;
    run.train.enable_semi = false;
    let samples = build_dataset(&run, run.train.seed).unwrap();
    let mut tr = Trainer::<f32>::new(run, samples, Vec::new()).unwrap();
    let r = tr.step().unwrap();
    assert_eq!(r.backbone_updates, 1, "joint step only");
    assert_eq!(r.d_updates, 0);
    assert_eq!(r.c_updates, 0);
    assert_eq!(r.g_updates, 0);
    assert_eq!(r.f_updates, 0);
    assert_eq!(r.l_semi, 0.0);
    assert_eq!(r.l_d, 0.0);
    assert_eq!(r.l_g, 0.0);
    assert_eq!(r.l_f, 0.0);
    assert!(r.l_sup > 0.0);
}

#[test]
fn checkpoint_resume_is_bit_compatible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.aurc");

    let run = tiny_run(13);
    let samples = build_dataset(&run, run.train.seed).unwrap();

    let mut a = Trainer::<f32>::new(run.clone(), samples.clone(), Vec::new()).unwrap();
    a.step().unwrap();
    a.step().unwrap();
    a.save_checkpoint(&ckpt).unwrap();

    let mut b = Trainer::<f32>::resume(run.clone(), samples.clone(), Vec::new(), &ckpt).unwrap();
    assert_eq!(b.current_iteration(), 2);

    let all_a: Vec<_> = a.model.store.ids().collect();
    let all_b: Vec<_> = b.model.store.ids().collect();
    assert_eq!(
        a.model.store.group_digest(&all_a),
        b.model.store.group_digest(&all_b),
        "restored parameters differ"
    );

    for _ in 0..2 {
        let ra = a.step().unwrap();
        let rb = b.step().unwrap();
        assert_eq!(ra.iter, rb.iter);
        assert_eq!(ra.l_sup.to_bits(), rb.l_sup.to_bits());
        assert_eq!(ra.l_semi.to_bits(), rb.l_semi.to_bits());
        assert_eq!(ra.l_d.to_bits(), rb.l_d.to_bits());
        assert_eq!(ra.l_g.to_bits(), rb.l_g.to_bits());
        assert_eq!(ra.l_f.to_bits(), rb.l_f.to_bits());
    }
    assert_eq!(
        a.model.store.group_digest(&all_a),
        b.model.store.group_digest(&all_b),
        "trajectories diverged after resume"
    );
}
