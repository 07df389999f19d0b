use stvg_core::autograd::{Graph, Var};
use stvg_core::config::*;
use stvg_core::corpus::{generate_corpus, splitmix64, SceneConfig};
use stvg_core::model::{Model, Prepared, Vocabularies};
use stvg_core::params::ParamId;

fn tiny(method: MethodConfig) -> (Model, Prepared) {
    let cfg = RunConfig {
        scene: SceneConfig {
            frame_count: 4,
            frame_height: 8,
            frame_width: 8,
            target_span_ratio: 0.5,
            ..SceneConfig::default()
        },
        model: ModelConfig {
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            c_app: 8,
            c_mot: 8,
            c_text: 8,
            stem_channels: 4,
            patch1: 2,
            patch2: 2,
            n_tokens: 8,
            ..ModelConfig::desk()
        },
        method,
        loss: LossConfig {
            temporal_sigma: Some(1.0),
            ..LossConfig::default()
        },
        seed: 11,
        ..RunConfig::default()
    };
    let samples = generate_corpus(&cfg.scene, 6, 5).unwrap();
    let vocab = Vocabularies::build(&samples, &cfg).unwrap();
    let mut model = Model::new(&cfg, vocab).unwrap();
    // sampled weights: no bias sits exactly at a ReLU kink
    let mut state = 0x5eed_u64;
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            state = splitmix64(state);
            *v += 0.2 * ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
        }
    }
    assert_eq!(model.grid, (2, 2));
    let x = model.vocab.prepare(&samples[0], model.grid).unwrap();
    (model, x)
}

type Pick = fn(&Model, &mut Graph, &Prepared) -> Var;

fn total(m: &Model, g: &mut Graph, x: &Prepared) -> Var {
    m.loss(g, x).unwrap().0
}

fn term(m: &Model, g: &mut Graph, x: &Prepared, which: usize) -> Var {
    let f = m.forward(g, x).unwrap();
    let t = m.loss_terms(g, &f, x).unwrap();
    [t.tts, t.asa, t.kl, t.l1, t.iou][which]
}

fn value(m: &Model, x: &Prepared, pick: Pick) -> f64 {
    let mut g = Graph::new(&m.store);
    let v = pick(m, &mut g, x);
    g.value(v).data()[0]
}

/// Worst relative error (denominator floored at 1e-5) over a subset of scalars from every tensor.
fn check(model: &mut Model, x: &Prepared, pick: Pick) -> (f64, usize) {
    let mut g = Graph::new(&model.store);
    let loss = pick(model, &mut g, x);
    let grads = g.backward(loss);
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let n = model.store.value(id).numel();
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let step = (n / 3).max(1);
        for j in (0..n).step_by(step) {
            let orig = model.store.value(id).data()[j];
            model.store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = value(model, x, pick);
            model.store.get_mut(id).value.data_mut()[j] = orig - h;
            let down = value(model, x, pick);
            model.store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

const TERMS: [(&str, Pick); 5] = [
    ("tts", |m, g, x| term(m, g, x, 0)),
    ("asa", |m, g, x| term(m, g, x, 1)),
    ("kl", |m, g, x| term(m, g, x, 2)),
    ("l1", |m, g, x| term(m, g, x, 3)),
    ("iou", |m, g, x| term(m, g, x, 4)),
];

#[test]
fn each_loss_term_and_the_total_match_finite_differences() {
    let (mut model, x) = tiny(MethodConfig::default());
    for (name, pick) in TERMS.iter().copied().chain([("total", total as Pick)]) {
        let (worst, n) = check(&mut model, &x, pick);
        assert!(n > 100);
        assert!(worst <= 1e-4, "{}: relative error {:e}", name, worst);
    }
}

#[test]
fn oracle_and_instance_variants_match_finite_differences() {
    let instance = MethodConfig {
        activation: ActivationMode::Instance,
        ..MethodConfig::default()
    };
    for method in [MethodConfig::oracle(), instance] {
        let (mut model, x) = tiny(method);
        let (worst, _) = check(&mut model, &x, total);
        assert!(worst <= 1e-4, "relative error {:e}", worst);
    }
}
