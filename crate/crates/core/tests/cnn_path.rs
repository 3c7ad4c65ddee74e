use avalign_core::corpus::{self, CorpusConfig};
use avalign_core::gradcheck::grad_check;
use avalign_core::model::{Example, FusionVariant, MemoryEdit, Model, ModelConfig, ModelKind, VideoData};
use avalign_core::train::{train_step, Adam};
use avalign_core::visual::{CnnConfig, ImageFrameSeq, VISUAL_DIM};
use avalign_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rendered_lip_frames_through_full_cnn() {
    let cfg = CorpusConfig {
        sentences: 1,
        test_sentences: 0,
        min_len: 2,
        max_len: 3,
        ..Default::default()
    };
    let c = corpus::generate_corpus(&cfg, 4).unwrap();
    let s = &c.train[0];
    let frames = s.render_frames();
    assert_eq!(frames.len(), s.video.features.rows());
    assert!(frames.frames.data().iter().all(|v| (0.0..=255.0).contains(v)));

    let mut mc = ModelConfig::toy(ModelKind::AvAlignAu);
    mc.video_dim = VISUAL_DIM;
    mc.cnn = Some(CnnConfig::default());
    let mut model = Model::new(mc, 0).unwrap();
    let mut ex = Example::from_sample(s).unwrap();
    ex.video = Some(VideoData::Frames(frames));

    let before = model.loss(&ex).unwrap().total;
    let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
    for _ in 0..5 {
        train_step(&mut model, &mut opt, &[&ex], 1.0).unwrap();
    }
    let after = model.loss(&ex).unwrap().total;
    assert!(after < before, "{before} -> {after}");
    let d = model.greedy_decode(&ex, 10, &MemoryEdit::None).unwrap();
    assert_eq!(d.record.alpha.unwrap().cols(), s.video.features.rows());
}

#[test]
fn micro_cnn_model_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mc = ModelConfig::micro(ModelKind::AvAlignAu, FusionVariant::Baseline);
    let cnn = CnnConfig::micro();
    mc.video_dim = cnn.out_dim;
    let size = cnn.input_size;
    mc.cnn = Some(cnn);
    let model = Model::new(mc, 5).unwrap();
    let m = 2;
    let ex = Example {
        id: "cnn".into(),
        audio: Tensor::from_fn(vec![3, 3], |_| rng.random_range(-1.0..1.0)),
        video: Some(VideoData::Frames(ImageFrameSeq {
            frames: Tensor::from_fn(vec![m, size, size, 3], |_| rng.random_range(0.0..255.0)),
            frame_period_s: 0.04,
        })),
        au_targets: Some(Tensor::from_fn(vec![m, 2], |_| rng.random_range(0.0..1.0))),
        label: vec![3, 4],
    };
    let r = grad_check(
        |g, store| {
            let mm = Model {
                config: model.config.clone(),
                params: store.clone(),
            };
            Ok(mm.forward(g, &ex, &MemoryEdit::None)?.loss)
        },
        &model.params,
        1e-5,
        1e-3,
        Some(6),
    )
    .unwrap();
    assert!(r.passed, "{:?}", r.per_param);
}
