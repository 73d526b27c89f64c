use codemae::model::ParamGroup;
use codemae::trainer::{load_registry, load_teacher, MetricsRecord, TrainConfig, Trainer};
use codemae::Graph;

fn config(extra: &[(&str, &str)]) -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("image_size", "16"),
        ("patch", "4"),
        ("width", "16"),
        ("heads", "2"),
        ("encoder_depth", "1"),
        ("decoder_width", "16"),
        ("decoder_heads", "2"),
        ("decoder_depth", "1"),
        ("cdr_depth", "1"),
        ("epochs", "5"),
        ("warmup_epochs", "1"),
        ("lr", "0.001"),
        ("synth_scenes", "64"),
        ("batch_size", "8"),
    ]
    .iter()
    .chain(extra)
    {
        c.set(k, v).unwrap();
    }
    c
}

fn trainer(c: &TrainConfig) -> Trainer {
    Trainer::new(c.clone(), load_registry(c).unwrap(), load_teacher(c).unwrap()).unwrap()
}

fn epoch_mean(m: &[MetricsRecord], epoch: usize) -> f64 {
    let rows: Vec<f64> = m.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn loss_falls_over_five_epochs() {
    for seed in ["0", "1", "2"] {
        let c = config(&[("seed", seed), ("synth_seed", seed), ("synth_unpaired_fraction", "0"), ("unpaired_weight", "0")]);
        let mut t = trainer(&c);
        t.run(|_, _| Ok(())).unwrap();
        let (first, last) = (epoch_mean(&t.metrics, 0), epoch_mean(&t.metrics, 4));
        assert!(last < first, "seed {seed}: epoch 1 {first}, epoch 5 {last}");
    }
}

#[test]
fn identical_configs_give_identical_logs() {
    let c = config(&[("epochs", "2")]);
    let (mut a, mut b) = (trainer(&c), trainer(&c));
    a.run(|_, _| Ok(())).unwrap();
    b.run(|_, _| Ok(())).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model.store, b.model.store);
}

#[test]
fn loss_terms_follow_flags() {
    for (okd, ccl, cdr) in [(true, true, true), (false, true, false), (true, false, true), (false, false, false)] {
        let f = |b: bool| if b { "true" } else { "false" };
        let c = config(&[
            ("epochs", "2"),
            ("enable_okd", f(okd)),
            ("enable_ccl", f(ccl)),
            ("enable_cdr", f(cdr)),
        ]);
        let mut t = trainer(&c);
        t.run(|_, _| Ok(())).unwrap();
        assert!(t.metrics.iter().any(|r| r.paired) && t.metrics.iter().any(|r| !r.paired));
        for r in &t.metrics {
            assert!(r.l_mae > 0.0);
            assert_eq!(r.l_okd > 0.0, okd, "{r:?}");
            assert_eq!(r.l_ccl > 0.0, ccl && r.paired, "{r:?}");
            assert_eq!(r.l_cdr > 0.0, cdr && r.paired, "{r:?}");
            let sum = r.l_mae + r.l_okd + r.l_ccl + r.l_cdr;
            assert!((sum - r.total).abs() <= 1e-5 * r.total.abs().max(1.0), "{r:?}");
        }
    }
}

#[test]
fn every_group_receives_gradient_on_paired_batches() {
    let c = config(&[("synth_unpaired_fraction", "0"), ("unpaired_weight", "0")]);
    let mut t = trainer(&c);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..5 {
        let batch = t.next_batch().unwrap();
        assert!(batch.paired);
        let mut g = Graph::new();
        let out = codemae::objectives::total_loss(&mut g, &batch, &t.model, &t.teacher, &c.objective).unwrap();
        g.backward(out.total).unwrap();
        let grads = g.param_grads(&t.model.store);
        for (id, gr) in t.model.store.ids().zip(&grads) {
            if gr.iter().any(|v| *v != 0.0) {
                seen.insert(ParamGroup::of(t.model.store.name(id)).unwrap());
            }
        }
        t.train_step().unwrap();
    }
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), ParamGroup::ALL.to_vec());
}

#[test]
fn divergence_aborts_with_a_numerical_error() {
    let c = config(&[("lr", "1e30"), ("init_std", "10")]);
    let mut t = trainer(&c);
    let err = t.run(|_, _| Ok(())).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert!(t.step < t.total_steps());
}

#[test]
fn schedule_reaches_zero_at_the_end() {
    let c = config(&[]);
    let t = trainer(&c);
    let n = t.total_steps();
    assert_eq!(t.lr_at(0), 0.0);
    let warm = t.steps_per_epoch();
    assert!((t.lr_at(warm) - c.lr).abs() < 1e-12);
    assert!(t.lr_at(n - 1) < c.lr * 0.01);
}
