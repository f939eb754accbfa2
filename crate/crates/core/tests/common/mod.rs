#![allow(dead_code)]

use mrjl::autograd::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use mrjl::config::TrainConfig;
use mrjl::data::{toy, TrainSet};
use mrjl::dffn::{BackboneConfig, DffnConfig};
use mrjl::gradcheck::{self, GradCheckReport};
use mrjl::model::{ModelConfig, Mrjl};
use mrjl::params::ParamStore;
use mrjl::rrn::{EncoderConfig, RrnConfig};
use mrjl::dffn::Branch;
use mrjl::rrn::DecoderKind;
use mrjl::trainer::{build_losses, reid_terms_of, BatchTensors, LossVars};

pub const H: usize = 16;
pub const W: usize = 8;
pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Compact encoder and a two-layer stub backbone at 16×8.
pub fn stub_model(num_classes: usize) -> ModelConfig {
    ModelConfig {
        height: H,
        width: W,
        rrn: RrnConfig::from_encoder(EncoderConfig::compact(2)),
        dffn: DffnConfig {
            backbone: BackboneConfig::Stub {
                widths: vec![2, 2],
                strides: vec![2, 1],
                kernel: 3,
            },
        },
        num_classes,
    }
}

/// Builds the stub model and moves every parameter off its initial value,
/// so no ReLU input sits exactly on the kink (zero biases over zero
/// activations would).
pub fn jittered_model(num_classes: usize, seed: u64) -> (Mrjl, ParamStore) {
    let (model, mut store) = Mrjl::new(stub_model(num_classes), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    (model, store)
}

/// Two persons, one HR and one LR image each, with pixel noise on the
/// network input.
pub fn stub_batch(seed: u64) -> (TrainConfig, BatchTensors, usize) {
    let set = TrainSet::in_memory(toy::corpus(3, 4, H, W, seed), H, W).unwrap();
    let cfg = TrainConfig {
        persons_per_batch: 2,
        hr_per_person: 1,
        lr_per_person: 1,
        seed,
        ..TrainConfig::small(H, W)
    };
    let batch = cfg.sampler().sample(&set).unwrap();
    let mut bt = BatchTensors::new(&batch, cfg.lr_standard.rate()).unwrap();
    // flat synthetic colours repeat one pre-activation over many pixels
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in bt.input.data_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    (cfg, bt, set.num_classes())
}

pub fn loss_value(model: &Mrjl, store: &ParamStore, cfg: &TrainConfig, bt: &BatchTensors, pick: fn(&LossVars) -> mrjl::autograd::Var) -> f64 {
    let mut g = Graph::new(store, true);
    let l = build_losses(model, &mut g, bt, cfg).unwrap();
    g.value(pick(&l)).item()
}

pub struct LossCheck {
    pub report: GradCheckReport,
    /// Parameters the loss cannot reach and that got no gradient.
    pub unreachable: usize,
}

fn rrn_only(name: &str) -> bool {
    name.starts_with("rrn.")
}

/// Finite-difference check of the reconstruction loss. Every RRN scalar is
/// perturbed; every other parameter must receive no gradient at all.
pub fn check_mse(seed: u64) -> LossCheck {
    let (cfg, bt, classes) = stub_batch(seed);
    let (model, mut store) = jittered_model(classes, seed);
    let grads = {
        let mut g = Graph::new(&store, true);
        let l = build_losses(&model, &mut g, &bt, &cfg).unwrap();
        g.backward(l.mse).unwrap()
    };
    let unreachable = store.ids().filter(|&id| !rrn_only(&store.get(id).name)).collect::<Vec<_>>();
    assert!(unreachable.iter().all(|&id| grads.get(id).is_none()));
    let report = gradcheck::check_refined(&mut store, &grads, STEP, TOL, Some(&rrn_only), |s| {
        Ok(loss_value(&model, s, &cfg, &bt, |l| l.mse))
    })
    .unwrap();
    LossCheck {
        report,
        unreachable: unreachable.len(),
    }
}

/// Finite-difference check of the re-identification loss over every
/// parameter scalar. Feature-network and head parameters are perturbed on
/// top of cached reconstructions, which they cannot influence.
pub fn check_reid(seed: u64) -> GradCheckReport {
    let (cfg, bt, classes) = stub_batch(seed);
    let (model, mut store) = jittered_model(classes, seed);
    let (grads, cached) = {
        let mut g = Graph::new(&store, true);
        let x = g.input(bt.input.clone());
        let enc = model.rrn.encode_vars(&mut g, x).unwrap();
        let mut cached = Vec::new();
        for kind in [DecoderKind::Hr, DecoderKind::Lr] {
            let r = model.rrn.decode_vars(&mut g, &enc, kind).unwrap();
            let rows = g.gather(r, &bt.dffn_rows).unwrap();
            cached.push(g.value(rows).clone());
        }
        let mut g = Graph::new(&store, true);
        let l = build_losses(&model, &mut g, &bt, &cfg).unwrap();
        (g.backward(l.reid).unwrap(), cached)
    };
    let mut report = gradcheck::check_refined(&mut store, &grads, STEP, TOL, Some(&rrn_only), |s| {
        Ok(loss_value(&model, s, &cfg, &bt, |l| l.reid))
    })
    .unwrap();
    let rest = gradcheck::check_refined(&mut store, &grads, STEP, TOL, Some(&|n: &str| !rrn_only(n)), |s| {
        let mut g = Graph::new(s, true);
        let mut terms = Vec::new();
        for (branch, imgs) in Branch::BOTH.into_iter().zip(&cached) {
            let x = g.input(imgs.clone());
            let (ce, trip) = reid_terms_of(&model, &mut g, branch, x, &bt.labels, &cfg)?;
            terms.extend(ce.into_iter().map(|v| (v, 1.0)));
            terms.extend(trip.into_iter().map(|v| (v, cfg.gamma)));
        }
        let total = g.combine(&terms)?;
        Ok(g.value(total).item())
    })
    .unwrap();
    report.merge(rest);
    report
}

