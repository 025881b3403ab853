use paint_core::adapter::{AdaptMode, AdaptationConfig, Adapter, Routing};
use paint_core::diffcore::Tensor;
use paint_core::encoder::{argmax, EncoderConfig, EncoderParams, Image};
use paint_core::prompt_memory::mean_query;
use paint_core::stream_bench::corruption::{corrupt, CorruptionKind, DomainSpec};
use paint_core::stream_bench::dataset::render;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_encoder(seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        image_side: 8,
        channels: 1,
        patch: 4,
        dim: 16,
        depth: 4,
        heads: 2,
        mlp_ratio: 2,
        classes: 10,
    };
    EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Batches that alternate between corruption kinds.
fn batches(count: usize, size: usize, seed: u64) -> Vec<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let kind = CorruptionKind::ALL[(t / 3) % CorruptionKind::ALL.len()];
            let domain = DomainSpec::new(kind, 5).unwrap();
            (0..size)
                .map(|_| {
                    let class = rng.random_range(0..10);
                    corrupt(&render(class, 8, &mut rng), domain, &mut rng).unwrap()
                })
                .collect()
        })
        .collect()
}

fn config(eta: f64) -> AdaptationConfig {
    AdaptationConfig {
        eta,
        phi: 0.0,
        lr: 0.05,
        batch_size: 8,
        ..AdaptationConfig::default()
    }
}

fn named(params: &EncoderParams) -> Vec<(String, Tensor)> {
    params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

#[test]
fn paint_updates_only_the_selected_prompt_and_shallow_blocks() {
    let source = small_encoder(1);
    let source_hash = source.fingerprint();
    let (mut allocated, mut reused) = (0, 0);
    for eta in [0.2, 1.0] {
        let mut adapter = Adapter::new(&source, config(eta), AdaptMode::PAINT).unwrap();
        let s = adapter.config().shallow_blocks;
        let mut changed_shallow = false;
        for (t, images) in batches(15, 8, 2).iter().enumerate() {
            let before_params = named(adapter.live());
            let before_memory = adapter.memory().clone();
            let steps = adapter.sgd_steps();
            let out = adapter.adapt_batch(images).unwrap();
            let selected = out.selected_entry.unwrap();
            if out.was_new {
                allocated += 1
            } else {
                reused += 1
            }

            assert_eq!(adapter.sgd_steps(), steps + 1, "exactly one step per batch");
            assert_eq!(
                adapter.memory().len(),
                before_memory.len() + usize::from(out.was_new)
            );
            assert_eq!(out.prompt_count_after, adapter.memory().len());
            assert_eq!(out.batch_index, t);

            for (j, entry) in before_memory.entries().iter().enumerate() {
                if j != selected {
                    assert_eq!(
                        adapter.memory().get(j).unwrap(),
                        entry,
                        "entry {j} touched at batch {t}"
                    );
                }
            }
            if out.was_new {
                // A fresh key is the batch-mean query, not moving-averaged.
                let q = source.queries(images).unwrap();
                assert_eq!(adapter.memory().get(selected).unwrap().key, mean_query(&q));
                assert_eq!(adapter.memory().get(selected).unwrap().update_count, 0);
            } else {
                let prev = before_memory.get(selected).unwrap();
                assert_eq!(
                    adapter.memory().get(selected).unwrap().update_count,
                    prev.update_count + 1
                );
            }
            assert_ne!(
                adapter.memory().get(selected).unwrap().value,
                before_memory
                    .entries()
                    .get(selected)
                    .map_or_else(|| Tensor::zeros(&[0]), |e| e.value.clone()),
            );

            for ((name, old), (_, new)) in before_params.iter().zip(named(adapter.live())) {
                match block_index(name) {
                    Some(b) if b < s => changed_shallow |= old != &new,
                    _ => assert_eq!(old, &new, "{name} changed at batch {t}"),
                }
            }
            assert_eq!(
                adapter.predict(images, Some(selected)).unwrap(),
                out.predictions
            );
        }
        assert!(changed_shallow);
        assert_eq!(adapter.source().fingerprint(), source_hash);
    }
    assert!(allocated > 2 && reused > 0, "{allocated} {reused}");
    assert_eq!(source.fingerprint(), source_hash);
}

#[test]
fn ablations_freeze_their_component() {
    let source = small_encoder(3);
    let data = batches(6, 8, 4);

    let mut no_prompt = Adapter::new(&source, config(0.2), AdaptMode::NO_PROMPT_TUNING).unwrap();
    let mut no_encoder = Adapter::new(&source, config(0.2), AdaptMode::NO_ENCODER_TUNING).unwrap();
    let mut entropy = Adapter::new(&source, config(0.2), AdaptMode::ENTROPY_ONLY).unwrap();
    let mut frozen = Adapter::new(&source, config(0.2), AdaptMode::FROZEN).unwrap();
    let mut initial_values = Vec::new();
    for images in &data {
        let out = no_prompt.adapt_batch(images).unwrap();
        if out.was_new {
            initial_values.push(
                no_prompt
                    .memory()
                    .get(out.selected_entry.unwrap())
                    .unwrap()
                    .value
                    .clone(),
            );
        }
        no_encoder.adapt_batch(images).unwrap();
        let e = entropy.adapt_batch(images).unwrap();
        assert_eq!(e.selected_entry, None);
        let f = frozen.adapt_batch(images).unwrap();
        let (_, probs) = source.infer(images, None).unwrap();
        let expect: Vec<usize> = (0..images.len()).map(|r| argmax(probs.row(r))).collect();
        assert_eq!(f.predictions, expect);
    }
    let values: Vec<Tensor> = no_prompt
        .memory()
        .entries()
        .iter()
        .map(|e| e.value.clone())
        .collect();
    assert_eq!(values, initial_values);
    assert_eq!(no_encoder.live().fingerprint(), source.fingerprint());
    assert_ne!(entropy.live().fingerprint(), source.fingerprint());
    assert!(entropy.memory().is_empty());
    assert_eq!(frozen.sgd_steps(), 0);
    assert_eq!(frozen.live().fingerprint(), source.fingerprint());
    assert_eq!(entropy.sgd_steps(), data.len());
}

#[test]
fn zero_learning_rate_leaves_everything_but_keys_unchanged() {
    let source = small_encoder(5);
    let cfg = AdaptationConfig {
        lr: 0.0,
        ..config(0.2)
    };
    let mut adapter = Adapter::new(&source, cfg, AdaptMode::PAINT).unwrap();
    for images in batches(4, 8, 6) {
        let out = adapter.adapt_batch(&images).unwrap();
        let entry = adapter.memory().get(out.selected_entry.unwrap()).unwrap();
        let (_, probs) = source.infer(&images, Some(&entry.value)).unwrap();
        let pre: Vec<usize> = (0..images.len()).map(|r| argmax(probs.row(r))).collect();
        assert_eq!(out.predictions, pre);
    }
    assert_eq!(adapter.live().fingerprint(), source.fingerprint());
}

#[test]
fn probe_is_read_only() {
    let source = small_encoder(7);
    let data = batches(8, 8, 8);
    let probe_images: Vec<Image> = data[0].iter().chain(&data[5]).cloned().collect();
    let probe_labels = vec![0; probe_images.len()];

    let mut plain = Adapter::new(&source, config(0.5), AdaptMode::PAINT).unwrap();
    let mut probed = Adapter::new(&source, config(0.5), AdaptMode::PAINT).unwrap();
    for images in &data {
        let a = plain.adapt_batch(images).unwrap();
        let memory = probed.memory().clone();
        let acc = probed.probe_accuracy(&probe_images, &probe_labels).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(probed.memory(), &memory);
        let b = probed.adapt_batch(images).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(plain.live().fingerprint(), probed.live().fingerprint());
    assert_eq!(plain.memory(), probed.memory());
}

#[test]
fn fixed_routing_uses_the_given_entry() {
    let source = small_encoder(9);
    let mut adapter = Adapter::new(&source, config(0.2), AdaptMode::PAINT).unwrap();
    let data = batches(5, 8, 10);
    let first = adapter
        .adapt_batch_routed(&data[0], Routing::Fixed(None))
        .unwrap();
    assert!(first.was_new);
    let second = adapter
        .adapt_batch_routed(&data[1], Routing::Fixed(None))
        .unwrap();
    assert_eq!(second.selected_entry, Some(1));
    for images in &data[2..] {
        let out = adapter
            .adapt_batch_routed(images, Routing::Fixed(Some(0)))
            .unwrap();
        assert_eq!(out.selected_entry, Some(0));
        assert!(!out.was_new);
    }
    assert_eq!(adapter.memory().len(), 2);
    assert!(adapter
        .adapt_batch_routed(&data[0], Routing::Fixed(Some(7)))
        .is_err());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let source = small_encoder(11);
    let data = batches(6, 8, 12);
    let run = || {
        let mut a = Adapter::new(&source, config(0.3), AdaptMode::PAINT).unwrap();
        let outs: Vec<_> = data.iter().map(|b| a.adapt_batch(b).unwrap()).collect();
        (outs, a.live().fingerprint())
    };
    assert_eq!(run(), run());
}
