use paint_core::diffcore::{finite_difference_check, Graph, Tensor, Var};
use paint_core::encoder::{patchify, BlockVars, EncoderConfig, EncoderParams, Image, Trainable};
use paint_core::objectives::{self, assign_pseudo_labels, build_mixed_batch, MixedBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BLOCK_TENSORS: usize = 12;

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        image_side: 8,
        channels: 1,
        patch: 4,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        classes: 4,
    }
}

struct Case {
    params: EncoderParams,
    images: Vec<Image>,
    prompt: Tensor,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let params = EncoderParams::init(cfg.clone(), &mut rng).unwrap();
    let images = (0..4)
        .map(|_| {
            let data = (0..64).map(|_| rng.random_range(0.0..=1.0)).collect();
            Image::new(8, 8, 1, data).unwrap()
        })
        .collect();
    // Alternate between allocation-sized and unit-sized prompts.
    let range = if seed % 2 == 0 { 0.02 } else { 1.0 };
    let prompt_data = (0..2 * cfg.dim)
        .map(|_| rng.random_range(-range..=range))
        .collect();
    Case {
        params,
        images,
        prompt: Tensor::new(vec![2, cfg.dim], prompt_data).unwrap(),
    }
}

/// Trainable tensors in order: every block's tensors, then the prompt.
fn trainable_tensors(case: &Case) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = case
        .params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| n.starts_with("blocks."))
        .map(|(_, t)| t.clone())
        .collect();
    assert_eq!(out.len(), BLOCK_TENSORS * tiny_config().depth);
    out.push(case.prompt.clone());
    out
}

/// Rebinds the encoder with the given block and prompt handles.
fn forward(
    g: &mut Graph,
    params: &EncoderParams,
    vars: &[Var],
    images: &[Image],
) -> paint_core::diffcore::Result<Var> {
    let mut ev = params.bind(g, Trainable::Nothing);
    for (i, block) in ev.blocks.iter_mut().enumerate() {
        *block = BlockVars::from_slice(&vars[i * BLOCK_TENSORS..(i + 1) * BLOCK_TENSORS]);
    }
    let prompt = vars[vars.len() - 1];
    let px = g.constant(patchify(images, &params.config).expect("valid images"));
    let out = ev
        .forward_images(g, px, images.len(), Some(prompt))
        .map_err(|e| paint_core::diffcore::DiffError::InvalidArgument {
            op: "forward",
            msg: e.to_string(),
        })?;
    Ok(out.probs)
}

fn mixed_for(case: &Case, seed: u64) -> MixedBatch {
    let (_, probs) = case.params.infer(&case.images, Some(&case.prompt)).unwrap();
    let labels = assign_pseudo_labels(&probs, 0.0);
    build_mixed_batch(
        &case.images,
        &labels,
        4,
        &mut ChaCha8Rng::seed_from_u64(seed),
        1.0,
    )
    .unwrap()
}

#[test]
fn paint_objective_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let c = case(seed);
        let mixed = mixed_for(&c, seed + 100);
        assert_eq!(mixed.len(), 4);
        let soft = mixed.soft_label_tensor().unwrap();
        let err = finite_difference_check(&trainable_tensors(&c), 1e-5, |g, vars| {
            let probs = forward(g, &c.params, vars, &c.images)?;
            let l_mi = objectives::graph::mutual_info(g, probs)?;
            let mixed_probs = forward(g, &c.params, vars, &mixed.images)?;
            let l_ic = objectives::graph::interpolation_consistency(g, mixed_probs, &soft)?;
            objectives::graph::combined(g, l_mi, l_ic, 1.0)
        })
        .unwrap();
        assert!(err <= 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn entropy_objective_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let c = case(seed + 1000);
        let err = finite_difference_check(&trainable_tensors(&c), 1e-5, |g, vars| {
            let probs = forward(g, &c.params, vars, &c.images)?;
            objectives::graph::entropy_only(g, probs)
        })
        .unwrap();
        assert!(err <= 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn one_step_on_near_uniform_predictions_lowers_mutual_info_loss() {
    for seed in 0..20u64 {
        let mut c = case(seed + 2000);
        // A shrunken head puts every prediction close to uniform.
        c.params.head.data_mut().iter_mut().for_each(|w| *w *= 0.05);
        let tensors = trainable_tensors(&c);
        let value_and_grads = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
            let probs = forward(&mut g, &c.params, &vars, &c.images).unwrap();
            let loss = objectives::graph::mutual_info(&mut g, probs).unwrap();
            let value = g.value(loss).item();
            let grads = g.backward(loss).unwrap();
            let gs: Vec<Tensor> = vars
                .iter()
                .map(|v| grads.get(*v).unwrap().clone())
                .collect();
            (value, gs, g.value(probs).clone())
        };
        let (before, grads, probs) = value_and_grads(&tensors);
        assert!(probs.data().iter().all(|p| (p - 0.25).abs() < 0.05));
        let stepped: Vec<Tensor> = tensors
            .iter()
            .zip(&grads)
            .map(|(t, gr)| {
                let data = t
                    .data()
                    .iter()
                    .zip(gr.data())
                    .map(|(v, d)| v - 1e-3 * d)
                    .collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        let (after, _, _) = value_and_grads(&stepped);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}
