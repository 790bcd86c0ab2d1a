//! Micro-sized networks and the generator loss computed two ways.

use fpdeblur_core::networks::{
    discriminator_forward, generator_forward, generator_graph, ModelParameters, NetKind, SCALE_FACTORS,
};
use fpdeblur_core::objective::{
    adversarial_losses, downsample_target, generator_loss_graph, pyramid, reconstruction_loss, ridge_loss,
    total_generator_loss, verifier_embedding_loss, verifier_feature_loss, AblationFlags, LossNetworks,
    LossReport, LossWeights,
};
use fpdeblur_core::tensor::{Tape, Tensor, Var};

use super::{micro_config, perturbed, random_images};

pub struct Micro {
    pub generator: ModelParameters,
    pub discriminators: Vec<ModelParameters>,
    pub ridge: ModelParameters,
    pub verifier: ModelParameters,
    pub x: Tensor,
    pub y: Tensor,
}

pub fn micro() -> Micro {
    let cfg = micro_config();
    Micro {
        generator: perturbed(NetKind::Generator, &cfg, 1, 0.3),
        discriminators: (0..3)
            .map(|s| perturbed(NetKind::Discriminator { scale: s }, &cfg, 10 + s as u64, 0.3))
            .collect(),
        ridge: perturbed(NetKind::RidgeExtractor, &cfg, 20, 0.3),
        verifier: perturbed(NetKind::Verifier, &cfg, 30, 0.3),
        x: random_images(2, 8, 40),
        y: random_images(2, 8, 41),
    }
}

/// Total generator loss through the plain (tape-free) functions.
pub fn plain_total(m: &Micro, generator: &ModelParameters, weights: &LossWeights, flags: &AblationFlags) -> f64 {
    let out = generator_forward(generator, &m.x).unwrap();
    let fake: Vec<Tensor> = (0..3)
        .map(|s| {
            let cond = downsample_target(&m.x, SCALE_FACTORS[s]).unwrap();
            discriminator_forward(&m.discriminators[s], &cond, out.scales()[s]).unwrap()
        })
        .collect();
    let (g, _) = adversarial_losses(&fake, &fake).unwrap();
    let rec = reconstruction_loss(&out, &m.y).unwrap();
    let ridge = ridge_loss(&m.ridge, &m.y, &out.full).unwrap();
    let verif = if flags.no_verifier_intermediate {
        verifier_embedding_loss(&m.verifier, &m.y, &out.full).unwrap()
    } else {
        verifier_feature_loss(&m.verifier, &m.y, &out.full).unwrap()
    };
    total_generator_loss([g[0], g[1], g[2]], rec, ridge, verif, weights, flags)
        .unwrap()
        .total
}

/// Generator loss recorded on a tape; returns total, report and gradients.
pub fn taped(
    m: &Micro,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> (f64, LossReport, Vec<(String, Tensor)>, Tape, Vec<Var>) {
    let mut tape = Tape::new();
    let g = m.generator.bind(&mut tape, true);
    let d: Vec<_> = m.discriminators.iter().map(|p| p.bind(&mut tape, false)).collect();
    let r = m.ridge.bind(&mut tape, false);
    let v = m.verifier.bind(&mut tape, false);
    let x = tape.constant(m.x.clone());
    let y = tape.constant(m.y.clone());
    let conditions = pyramid(&mut tape, x).unwrap();
    let targets = pyramid(&mut tape, y).unwrap();
    let out = generator_graph(&mut tape, &g, x).unwrap();
    let nets = LossNetworks {
        discriminators: [Some(&d[0]), Some(&d[1]), Some(&d[2])],
        ridge: Some(&r),
        verifier: Some(&v),
    };
    let loss = generator_loss_graph(&mut tape, &out, &conditions, &targets, &nets, weights, flags).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    let named = m
        .generator
        .tensors
        .keys()
        .map(|name| {
            let var = g.vars[name];
            let grad = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(m.generator.tensors[name].shape()));
            (name.clone(), grad)
        })
        .collect();
    let frozen: Vec<_> = d
        .iter()
        .chain([&r, &v])
        .flat_map(|b| b.vars.values().copied())
        .collect();
    let frozen_with_grad = frozen.into_iter().filter(|&v| grads.get(v).is_some()).collect();
    let report = loss.report(&tape, flags);
    (tape.value(loss.total).item(), report, named, tape, frozen_with_grad)
}

