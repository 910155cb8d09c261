use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use t2l_core::backend::{self, ClipBackend, EmbeddingBackend};
use t2l_core::config;
use t2l_core::dataset::{self, AugmentationConfig, GeometricTransform, TextTemplateBank};
use t2l_core::image::{self, EditLayer, Image, OpacityMap};
use t2l_core::losses::{self, LossParts, LossToggles, LossWeights, TERM_NAMES};
use t2l_core::trainer::{self, TrainConfig};
use t2l_core::video::{self, AtlasEdit, Layer, TexelMap, TexelRect, UvGrid, UvRect};

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, n)
}

fn image(h: usize, w: usize, v: Vec<f32>) -> Image {
    Image::from_planar(h, w, v).unwrap()
}

fn layer(h: usize, w: usize, c: Vec<f32>, a: Vec<f32>) -> EditLayer {
    EditLayer::new(image(h, w, c), OpacityMap::new(h, w, a).unwrap()).unwrap()
}

const H: usize = 3;
const W: usize = 4;
const N: usize = H * W;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_stays_between_layer_and_base(c in unit_vec(3 * N), a in unit_vec(N), b in unit_vec(3 * N)) {
        let out = image::composite(&layer(H, W, c.clone(), a), &image(H, W, b.clone())).unwrap();
        for (i, v) in out.planar().iter().enumerate() {
            let (lo, hi) = (c[i].min(b[i]), c[i].max(b[i]));
            prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
        }
    }

    #[test]
    fn composite_is_affine_in_the_base(
        c in unit_vec(3 * N), a in unit_vec(N), b1 in unit_vec(3 * N), b2 in unit_vec(3 * N), t in 0.0f32..=1.0,
    ) {
        let l = layer(H, W, c, a);
        let mix: Vec<f32> = b1.iter().zip(&b2).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let lhs = image::composite(&l, &image(H, W, mix)).unwrap();
        let r1 = image::composite(&l, &image(H, W, b1)).unwrap();
        let r2 = image::composite(&l, &image(H, W, b2)).unwrap();
        for i in 0..3 * N {
            let rhs = t * r1.planar()[i] + (1.0 - t) * r2.planar()[i];
            prop_assert!((lhs.planar()[i] - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn transparent_layer_is_bit_identical(c in unit_vec(3 * N), b in unit_vec(3 * N)) {
        let out = image::composite(&layer(H, W, c, vec![0.0; N]), &image(H, W, b.clone())).unwrap();
        prop_assert_eq!(out.planar(), b.as_slice());
    }

    #[test]
    fn cosine_distance_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f32..5.0, 8), b in prop::collection::vec(-5.0f32..5.0, 8),
    ) {
        let ab = backend::cosine_distance(&a, &b).value;
        let ba = backend::cosine_distance(&b, &a).value;
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&ab));
    }

    #[test]
    fn toggling_off_equals_zero_weight(
        parts in prop::array::uniform7(0.0f64..3.0), off in 0usize..6, w_boot in 0.0f64..10.0,
    ) {
        let parts = LossParts {
            comp_cos: parts[0], comp_dir: parts[1], screen: parts[2], structure: parts[3],
            sparsity_l1: parts[4], sparsity_l0: parts[5], bootstrap: parts[6],
        };
        let weights = LossWeights::image();
        let mut toggles = LossToggles::default();
        toggles.disable(TERM_NAMES[off]).unwrap();
        let toggled = losses::total_loss(&parts, &weights, w_boot, &toggles).total;
        let mut zeroed = parts;
        match TERM_NAMES[off] {
            "composition" => zeroed.comp_cos = 0.0,
            "directional" => zeroed.comp_dir = 0.0,
            "screen" => zeroed.screen = 0.0,
            "structure" => zeroed.structure = 0.0,
            "sparsity" => { zeroed.sparsity_l1 = 0.0; zeroed.sparsity_l0 = 0.0 }
            _ => zeroed.bootstrap = 0.0,
        }
        let removed = losses::total_loss(&zeroed, &weights, w_boot, &LossToggles::default()).total;
        prop_assert!((toggled - removed).abs() <= 1e-9 * removed.abs().max(1.0));
        prop_assert!(toggled >= 0.0);
    }

    #[test]
    fn sparsity_terms_are_nonnegative(a in unit_vec(N), gamma in 0.0f64..5.0) {
        let s = losses::sparsity_loss(&OpacityMap::new(H, W, a).unwrap(), gamma).unwrap();
        prop_assert!(s.l1 >= 0.0 && s.l0 >= 0.0 && s.combined >= 0.0 && s.combined.is_finite());
    }

    #[test]
    fn learning_rate_never_increases(step in 0usize..5000) {
        for cfg in [TrainConfig::image(), TrainConfig::video()] {
            prop_assert!(trainer::lr_at(step + 1, &cfg) <= trainer::lr_at(step, &cfg));
            prop_assert!(trainer::lr_at(step, &cfg) >= cfg.lr_floor);
        }
    }

    #[test]
    fn augmented_text_keeps_the_prompt(seed in any::<u64>(), prompt in "[a-z]{1,8}( [a-z]{1,8}){0,3}") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = dataset::augment_text(&prompt, &TextTemplateBank::default(), &mut rng);
        prop_assert!(text.contains(&prompt));
    }

    #[test]
    fn augmented_dims_stay_in_range(seed in any::<u64>(), h in 8usize..64, w in 8usize..64) {
        let cfg = AugmentationConfig::image();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, _) = dataset::sample_augmentation(h, w, &cfg, &mut rng);
        for (out, src) in [(t.output.0, h), (t.output.1, w)] {
            let (o, s) = (out as f64, src as f64);
            prop_assert!(o <= 1.2 * s + 0.5);
            // crop sides are floored and output sides rounded to whole pixels
            prop_assert!(o >= 0.8 * cfg.crop_fraction * s - 1.5);
        }
    }

    #[test]
    fn identity_transform_fixes_points(h in 1usize..50, w in 1usize..50, y in 0.0f64..50.0, x in 0.0f64..50.0) {
        let (oy, ox) = GeometricTransform::identity(h, w).map_point(y, x);
        prop_assert!((oy - y).abs() < 1e-9 && (ox - x).abs() < 1e-9);
    }

    #[test]
    fn texel_map_round_trips(
        res in 2usize..3000, row in 0.0f64..1.0, col in 0.0f64..1.0,
        u0 in -1.0f32..0.0, v0 in -1.0f32..0.0, du in 0.1f32..1.0, dv in 0.1f32..1.0,
    ) {
        let map = TexelMap { bounds: UvRect { u_min: u0, u_max: u0 + du, v_min: v0, v_max: v0 + dv }, resolution: res };
        let r = (res - 1) as f64;
        let (u, v) = map.uv(row * r, col * r);
        let (row2, col2) = map.texel(u, v);
        prop_assert!((row2 - row * r).abs() < 1e-6 * r.max(1.0) * 4.0);
        prop_assert!((col2 - col * r).abs() < 1e-6 * r.max(1.0) * 4.0);
    }

    #[test]
    fn rendering_is_linear_in_the_edit(
        c1 in unit_vec(3 * 16), c2 in unit_vec(3 * 16), a1 in unit_vec(16), a2 in unit_vec(16),
        uv in prop::collection::vec(-1.0f32..=1.0, 2 * N), t in 0.0f32..=1.0,
    ) {
        let map = TexelMap { bounds: UvRect::FULL, resolution: 4 };
        let grid = UvGrid { height: H, width: W, values: uv };
        let render = |c: Vec<f32>, a: Vec<f32>| {
            let edit = AtlasEdit { layer: Layer::Background, rect: TexelRect::full(4), edit: layer(4, 4, c, a) };
            video::render_layer_to_frame(&edit, &map, &grid).unwrap()
        };
        let mix = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| t * p + (1.0 - t) * q).collect::<Vec<_>>();
        let lhs = render(mix(&c1, &c2), mix(&a1, &a2));
        let (r1, r2) = (render(c1, a1), render(c2, a2));
        for i in 0..3 * N {
            let want = t * r1.color().planar()[i] + (1.0 - t) * r2.color().planar()[i];
            prop_assert!((lhs.color().planar()[i] - want).abs() < 1e-5);
        }
        for i in 0..N {
            let want = t * r1.alpha().values()[i] + (1.0 - t) * r2.alpha().values()[i];
            prop_assert!((lhs.alpha().values()[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn merge_prefers_the_override(base_seed in any::<i64>(), over_seed in any::<i64>(), steps in 1i64..100) {
        let mut base: toml::Table = toml::from_str(&format!(
            "seed = {base_seed}\n[train]\ntotal_steps = 5\nlr0 = 0.1\n[backend]\nkind = \"pretrained\"\nmodel_id = \"x\"\n"
        )).unwrap();
        let over: toml::Table = toml::from_str(&format!(
            "seed = {over_seed}\n[train]\ntotal_steps = {steps}\n[backend]\nkind = \"synthetic\"\nseed = 1\n"
        )).unwrap();
        config::merge_tables(&mut base, over);
        prop_assert_eq!(base["seed"].as_integer(), Some(over_seed));
        prop_assert_eq!(base["train"]["total_steps"].as_integer(), Some(steps));
        prop_assert_eq!(base["train"]["lr0"].as_float(), Some(0.1));
        // backend tables are replaced, not merged
        prop_assert!(base["backend"].get("model_id").is_none());
    }
}

#[test]
fn absent_edits_reproduce_the_frame() {
    let pkg = video::synthetic_package(&video::SyntheticSpec::default()).unwrap();
    for t in 0..pkg.frame_count() {
        let layers = pkg.frame_layers(t).unwrap();
        let (h, w) = pkg.frame_dims();
        let clear = EditLayer::transparent(h, w).unwrap();
        let a = video::blend_frame(&layers, None, None).unwrap();
        let b = video::blend_frame(&layers, Some(&clear), Some(&clear)).unwrap();
        assert_eq!(a.planar(), b.planar());
        assert_eq!(a.planar(), pkg.reconstruct_frame(t).unwrap().planar());
    }
}

#[test]
fn token_grid_matches_token_count() {
    let b = ClipBackend::synthetic(0).unwrap();
    for (h, w) in [(224, 224), (224, 320), (256, 224)] {
        let img = Image::filled(h, w, [0.2, 0.4, 0.6]).unwrap();
        let tokens = backend::spatial_tokens(&b, &img).unwrap();
        assert_eq!(tokens.rows * tokens.cols, tokens.count());
        assert_eq!((tokens.rows, tokens.cols), (h / b.patch_size(), w / b.patch_size()));
    }
}

#[test]
fn seeded_runs_repeat_exactly() {
    let b = ClipBackend::synthetic(4).unwrap();
    let src = Image::from_fn(32, 40, |y, x| [y as f32 / 32.0, x as f32 / 40.0, 0.5]).unwrap();
    let bundle = image::TextBundle::new("a bright sky").unwrap().with_roi("sky").unwrap();
    let cfg = TrainConfig {
        total_steps: 3,
        seed: 17,
        generator: t2l_core::generator::GeneratorConfig {
            encoder_depth: 3,
            base_channels: 8,
            ..Default::default()
        },
        ..TrainConfig::image()
    };
    let a = trainer::train_image(&src, &bundle, &cfg, &b, None).unwrap();
    let c = trainer::train_image(&src, &bundle, &cfg, &b, None).unwrap();
    assert_eq!(a.record.totals(), c.record.totals());
    assert_eq!(a.record.history.len(), 3);
    assert_eq!(a.layer.alpha().values(), c.layer.alpha().values());
}

#[test]
fn generator_output_keeps_odd_input_dims() {
    let g = t2l_core::generator::GeneratorState::build(
        &t2l_core::generator::GeneratorConfig {
            encoder_depth: 4,
            base_channels: 4,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    for (h, w) in [(17, 23), (1, 1), (30, 9)] {
        let out = g.forward(&Image::filled(h, w, [0.5; 3]).unwrap()).unwrap();
        assert_eq!(out.dims(), (h, w));
        assert!(out.alpha().values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
