use dualformer::blocks::{Htb, Lfe};
use dualformer::gradcheck::{check_block, GradCheckConfig};
use dualformer::model::{ModelConfig, Stage, StageRecord, Switch, LATENT_STRIDE};
use dualformer::nn::{conv2d_value, ConvSpec};
use dualformer::params::{Ctx, ParamBuilder, ParamStore, ParamVars};
use dualformer::{Model, Rng, Shape, Tape, Tensor, Var};

fn tiny<T: dualformer::Scalar>(seed: u64) -> (Model, ParamStore<T>) {
    Model::build(&ModelConfig::tiny(), &Rng::new(seed)).unwrap()
}

fn image<T: dualformer::Scalar>(seed: u64, shape: Shape) -> Tensor<T> {
    Rng::new(seed).uniform_tensor(shape, 0.0, 1.0)
}

fn trace(m: &Model, p: &ParamStore<f32>, x: &Tensor<f32>) -> Vec<StageRecord> {
    let tape = Tape::new();
    let pv = ParamVars::constants(p);
    let mut log = Vec::new();
    m.forward_to(&Ctx::new(&tape, &pv), &Var::constant(x.clone()), Stage::Output, &mut log).unwrap();
    log
}

#[test]
fn output_shape_equals_input_shape() {
    let (m, p) = tiny::<f32>(0);
    for shape in [Shape::new(1, 3, 64, 64), Shape::new(2, 3, 96, 80), Shape::new(1, 3, 16, 32)] {
        assert_eq!(m.infer(&p, &image(1, shape)).unwrap().shape(), shape);
    }
}

#[test]
fn paper_config_forward_shape() {
    let (m, p) = Model::build::<f32>(&ModelConfig::paper(), &Rng::new(0)).unwrap();
    let x = image(1, Shape::new(1, 3, 64, 64));
    let log = trace(&m, &p, &x);
    assert_eq!(log.last().unwrap().shape, x.shape());
    let latent = log.iter().find(|r| r.stage == Stage::LatentAfter(14)).unwrap();
    assert_eq!(latent.shape, Shape::new(1, 384, 4, 4));
    assert!(log.iter().all(|r| r.max_abs < 1e6));
}

#[test]
fn zero_weights_restore_identity() {
    let (m, mut p) = tiny::<f32>(2);
    p.zero_where(|n| n.ends_with(".weight"));
    let x = image(3, Shape::new(2, 3, 32, 32));
    assert_eq!(m.infer(&p, &x).unwrap().data(), x.data());

    let (m, mut p) = tiny::<f32>(4);
    p.zero_where(|n| n.starts_with("head."));
    assert_eq!(m.infer(&p, &x).unwrap().data(), x.data());
}

#[test]
fn stage_resolutions_follow_the_pyramid() {
    let (m, p) = tiny::<f32>(5);
    let (h, w) = (64, 48);
    let log = trace(&m, &p, &image(6, Shape::new(1, 3, h, w)));
    let dims = m.config.encoder_dims;
    let find = |s: Stage| log.iter().find(|r| r.stage == s).unwrap().shape;
    for i in 0..4 {
        let enc = find(Stage::Encoder(i));
        assert_eq!(enc, Shape::new(1, dims[i], h >> i, w >> i));
        assert_eq!(find(Stage::Decoder(i)), enc);
    }
    let latent = Shape::new(1, m.config.latent_dim, h / LATENT_STRIDE, w / LATENT_STRIDE);
    assert_eq!(find(Stage::LatentIn), latent);
    assert_eq!(find(Stage::LatentAfter(2)), latent);
    let order: Vec<Stage> = log.iter().map(|r| r.stage).collect();
    assert_eq!(order, m.stages());
}

#[test]
fn no_activation_explodes_at_init() {
    for seed in 0..3 {
        let (m, p) = tiny::<f32>(seed);
        for r in trace(&m, &p, &image(seed + 10, Shape::new(2, 3, 32, 32))) {
            assert!(r.max_abs.is_finite() && r.max_abs < 1e6, "{}: {}", r.stage, r.max_abs);
        }
    }
}

#[test]
fn forward_to_stops_at_the_requested_stage() {
    let (m, p) = tiny::<f32>(7);
    let x = image(8, Shape::new(1, 3, 32, 32));
    let tape = Tape::new();
    let pv = ParamVars::constants(&p);
    let cx = Ctx::new(&tape, &pv);
    let mut log = Vec::new();
    let y = m.forward_to(&cx, &Var::constant(x.clone()), Stage::Encoder(1), &mut log).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(y.shape(), Shape::new(1, 12, 16, 16));
    assert!(m.forward_to(&cx, &Var::constant(x), Stage::LatentAfter(3), &mut Vec::new()).is_err());
}

/// Rebuilds the tiny network from individually constructed blocks and raw
/// convolutions, reading weights out of the model's store by name.
#[test]
fn matches_composition_of_blocks() {
    let cfg = ModelConfig::tiny();
    let (m, p) = Model::build::<f64>(&cfg, &Rng::new(9)).unwrap();
    let x: Tensor<f64> = image(10, Shape::new(1, 3, 32, 32));

    let mut scratch = ParamStore::<f64>::new();
    let rng = Rng::new(0);
    let mut b = ParamBuilder::new(&mut scratch, &rng);
    let tape = Tape::new();
    let pv = ParamVars::constants(&p);
    let cx = Ctx::new(&tape, &pv);
    let conv = |x: &Tensor<f64>, name: &str, spec: ConvSpec| {
        let w = p.get(&format!("{name}.weight")).unwrap();
        let bias = p.get(&format!("{name}.bias")).unwrap();
        conv2d_value(x, w, Some(bias), &spec).unwrap()
    };
    let mut lfe = |x: Tensor<f64>, name: String, c: usize, e: usize| {
        let block = Lfe::new(&mut b, name, cfg.lfe_spec(c, e)).unwrap();
        block.forward(&cx, &Var::constant(x)).unwrap().value().clone()
    };

    let d = cfg.encoder_dims;
    let next = |i: usize| if i < 3 { d[i + 1] } else { cfg.latent_dim };
    let mut h = conv(&x, "stem", ConvSpec::new(3, d[0], 3));
    let mut skips = Vec::new();
    for i in 0..4 {
        for j in 0..cfg.encoder_depths[i] {
            h = lfe(h, format!("encoder.{i}.{j}"), d[i], cfg.lfe_expand[i]);
        }
        skips.push(h.clone());
        h = conv(&h, &format!("down.{i}"), ConvSpec::downsample(d[i], next(i)));
    }
    for k in 0..cfg.latent_depth {
        let mut s2 = ParamStore::<f64>::new();
        let block = Htb::new(&mut ParamBuilder::new(&mut s2, &rng), format!("latent.{k}"), cfg.htb_spec()).unwrap();
        h = block.forward(&cx, &Var::constant(h)).unwrap().value().clone();
    }
    for i in (0..4).rev() {
        h = conv(&h, &format!("up.{i}"), ConvSpec::upsample(next(i), d[i])).add(&skips[i]).unwrap();
        for j in 0..cfg.decoder_depths[3 - i] {
            h = lfe(h, format!("decoder.{i}.{j}"), d[i], cfg.decoder_expand[3 - i]);
        }
    }
    let want = conv(&h, "head", ConvSpec::new(d[0], 3, 3)).add(&x).unwrap();

    let got = m.infer(&p, &x).unwrap();
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn end_to_end_gradient_check() {
    let (m, p) = tiny::<f64>(11);
    let x = image(12, Shape::new(1, 3, 16, 16));
    let cfg = GradCheckConfig::default().with_tol(1e-3).with_max_entries(2);
    let r = check_block(&p, &x, |cx, x| m.forward(cx, x), &cfg).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > p.len());
}

#[test]
fn variant_switches_change_only_the_named_field() {
    let base = ModelConfig::paper();
    assert_eq!(base.variant(&["attn=cssa".parse::<Switch>().unwrap()]).unwrap(), base);
    let v = base.variant(&["htb_lfe=off".parse().unwrap()]).unwrap();
    assert_eq!(ModelConfig { htb_use_lfe: true, ..v }, base);
}

#[test]
fn f32_and_f64_builds_agree() {
    let (m, p32) = tiny::<f32>(13);
    let (_, p64) = tiny::<f64>(13);
    assert_eq!(p32, p64.cast::<f32>());
    let x64: Tensor<f64> = image(14, Shape::new(1, 3, 32, 32));
    let y32 = m.infer(&p32, &x64.cast::<f32>()).unwrap();
    let y64 = m.infer(&p64, &x64).unwrap();
    for (a, b) in y32.data().iter().zip(y64.data()) {
        assert!((f64::from(*a) - b).abs() < 1e-4);
    }
}
