use stbn_core::model::{StbnConfig, StbnModel};
use stbn_core::propagation::FlowAlignment;
use stbn_core::train::{TrainConfig, Trainer};
use stbn_core::videodata::{add_awgn, NoiseModel, TranslatingTexture, VideoSequence};

fn tiny() -> StbnConfig {
    let mut c = StbnConfig::desk().with_channels(1);
    c.blindspot.channels = 4;
    c.srfe.channels = 4;
    c.flow.hidden = 4;
    c
}

fn clip(seed: u64) -> VideoSequence {
    let clean = TranslatingTexture::new(24, 24, 1, (1.0, -0.5), 3, seed).render(4).unwrap();
    add_awgn(&clean, &NoiseModel::gaussian(25.0, seed).unwrap()).unwrap()
}

fn short_run() -> TrainConfig {
    let mut t = TrainConfig::desk();
    t.iterations = 6;
    t.crop_size = 16;
    t.seq_length = 3;
    t.distill.warmup_iterations = 3;
    t
}

fn train(seed: u64) -> StbnModel {
    let mut cfg = short_run();
    cfg.seed = seed;
    let model = StbnModel::new(tiny(), 1).unwrap();
    let mut t = Trainer::new(model, vec![clip(1), clip(2)], NoiseModel::gaussian(25.0, 0).unwrap(), cfg).unwrap();
    t.run(|s, _| {
        assert!(s.loss.is_finite());
        Ok(())
    })
    .unwrap();
    t.into_model()
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (a, b) = (train(5), train(5));
    for ((na, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(ta, tb, "{na}");
    }
    let c = train(6);
    assert!(a.params.iter().zip(c.params.iter()).any(|((_, x), (_, y))| x != y));
}

/// With lagged alignment the output at `(t, p)` is unchanged, bit for bit,
/// when `y_t(p)` changes, even though the flows are re-estimated from the
/// perturbed clip.
#[test]
fn lagged_alignment_is_blind_including_flow_estimation() {
    let model = train(3);
    assert_eq!(model.config.alignment, FlowAlignment::Lagged);
    let seq = clip(9);
    let base = model.blind_prediction(&seq).unwrap();
    for (t, y, x) in [(0, 5, 7), (1, 12, 12), (2, 3, 20), (3, 18, 9)] {
        let mut data = seq.data().to_vec();
        data[(t * 24 + y) * 24 + x] += 0.8;
        let poked = VideoSequence::new(4, 24, 24, 1, data).unwrap();
        let out = model.blind_prediction(&poked).unwrap();
        assert_eq!(out[t].at(0, 0, y, x), base[t].at(0, 0, y, x), "frame {t} pixel ({y}, {x})");
        // the poke must still reach other frames through the recurrence
        let other = (t + 1) % 4;
        assert!(out[other].data().iter().zip(base[other].data()).any(|(a, b)| a != b));
    }
}
