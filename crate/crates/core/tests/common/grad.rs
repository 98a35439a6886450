//! Central-difference gradient checks, shared by the gradient tests and the
//! acceptance report.

use mammoclu::backbone::{ClusterBlock, Preset};
use mammoclu::cluster::Neighborhood;
use mammoclu::fusion::{AlignEmbed, FuseView, OverlayMode, ViewAttentionMode};
use mammoclu::graph::{Graph, Var};
use mammoclu::imaging::Image;
use mammoclu::linalg::Mat;
use mammoclu::loss::{composite_loss_graph, LossWeights};
use mammoclu::model::{Model, ModelConfig};
use mammoclu::params::{Init, InitMode, ParamId, ParamStore};
use mammoclu::roi::MapCoord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_mat;

const H: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error over the listed `(param, flat index)` entries.
pub fn max_param_error<F>(store: &ParamStore, entries: &[(ParamId, usize)], loss: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let grads = {
        let mut g = Graph::new(store);
        let root = loss(&mut g);
        g.backward(root)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let root = loss(&mut g);
        g.scalar(root)
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for &(id, k) in entries {
        let orig = probe.get(id).data[k];
        probe.get_mut(id).data[k] = orig + H;
        let up = eval(&probe);
        probe.get_mut(id).data[k] = orig - H;
        let down = eval(&probe);
        probe.get_mut(id).data[k] = orig;
        let numeric = (up - down) / (2.0 * H);
        let analytic = grads.params[id.0].as_ref().map_or(0.0, |m| m.data[k]);
        let e = rel_err(analytic, numeric);
        // a non-finite error must never pass a threshold
        worst = if e.is_finite() { worst.max(e) } else { f64::INFINITY };
    }
    worst
}

pub fn all_entries(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |k| (id, k)))
        .collect()
}

/// `mean(out * r)` for a fixed random `r`, so every output entry matters.
pub fn project(g: &mut Graph, out: Var, r: &Mat) -> Var {
    let rv = g.input(r.clone());
    let prod = g.mul(out, rv);
    g.mean(prod)
}

fn block(seed: u64, nb: Neighborhood, width: usize) -> (ParamStore, ClusterBlock) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed, InitMode::Random);
    let b = ClusterBlock::new(&mut store, &mut init, "block", (4, 4), (2, 2), nb, width, 2)
        .expect("valid block");
    (store, b)
}

/// Every parameter of a 4x4 block with four-neighbour anchors.
pub fn block_param_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (store, block) = block(3, Neighborhood::Four, 8);
    let x = random_mat(&mut rng, 16, 8);
    let r = random_mat(&mut rng, 16, 8);
    let loss = |g: &mut Graph| {
        let xv = g.input(x.clone());
        let out = block.forward(g, xv).output;
        project(g, out, &r)
    };
    max_param_error(&store, &all_entries(&store), loss)
}

/// Every input entry of a 4x4 block with eight-neighbour anchors.
pub fn block_input_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (store, block) = block(4, Neighborhood::Eight, 6);
    let x = random_mat(&mut rng, 16, 6);
    let r = random_mat(&mut rng, 16, 6);
    let run = |x: &Mat| {
        let mut g = Graph::new(&store);
        let xv = g.variable(x.clone());
        let out = block.forward(&mut g, xv).output;
        let root = project(&mut g, out, &r);
        let grad = g.backward(root).of(xv).cloned();
        (g.scalar(root), grad)
    };
    let Some(analytic) = run(&x).1 else {
        return f64::INFINITY;
    };
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let mut up = x.clone();
        up.data[k] += H;
        let mut down = x.clone();
        down.data[k] -= H;
        let numeric = (run(&up).0 - run(&down).0) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data[k], numeric));
    }
    worst
}

pub fn align_embed_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let mut init = Init::new(5, InitMode::Random);
    let align = AlignEmbed::new(&mut store, &mut init, "align", 6, 5);
    let x = random_mat(&mut rng, 3, 6);
    let r = random_mat(&mut rng, 3, 5);
    let loss = |g: &mut Graph| {
        let xv = g.input(x.clone());
        let out = align.forward(g, xv).expect("width matches");
        project(g, out, &r)
    };
    max_param_error(&store, &all_entries(&store), loss)
}

pub fn fuse_view_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let mut init = Init::new(6, InitMode::Random);
    let fuse = FuseView::new(&mut store, &mut init, "fuse", 4);
    let gl = random_mat(&mut rng, 1, 4);
    let lo = random_mat(&mut rng, 1, 4);
    let r = random_mat(&mut rng, 1, 4);
    let loss = |g: &mut Graph| {
        let a = g.input(gl.clone());
        let b = g.input(lo.clone());
        let out = fuse.forward(g, a, b).expect("widths match");
        project(g, out, &r)
    };
    max_param_error(&store, &all_entries(&store), loss)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        global: Preset::Tiny.config(),
        local: Preset::Tiny.config(),
        image_size: (32, 32),
        num_patches: 2,
        patch_size: (8, 8),
        dim: None,
        overlay: OverlayMode::Sum,
        view_attention: ViewAttentionMode::Attention,
        zero_residual: false,
    }
}

pub fn random_views(rng: &mut ChaCha8Rng, size: usize) -> Vec<Image> {
    (0..4)
        .map(|_| {
            let gray: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
            Image::from_gray(size, size, &gray).expect("square image")
        })
        .collect()
}

/// Full study forward on the tiny presets with frozen patch coordinates;
/// checks 1% of all parameter entries plus the first entry of every tensor.
pub fn end_to_end_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = Model::new(&tiny_config(), 7).expect("tiny model");
    let views = random_views(&mut rng, 32);
    let frozen: Vec<Vec<MapCoord>> = (0..4)
        .map(|v| vec![MapCoord::new(v % 4, 0), MapCoord::new(3, (v + 1) % 4)])
        .collect();
    let weights = LossWeights::new(1.0, 1.0, 1.0, 0.1);
    let loss = |g: &mut Graph| {
        let vars = model.arch.study_forward(g, &views, Some(&frozen)).expect("forward");
        composite_loss_graph(g, &vars, 1, &weights).expect("loss").0
    };
    let entries = all_entries(&model.params);
    let want = entries.len().div_ceil(100);
    let mut pick = ChaCha8Rng::seed_from_u64(42);
    let mut sampled: Vec<_> = (0..want)
        .map(|_| entries[pick.gen_range(0..entries.len())])
        .collect();
    sampled.extend(model.params.ids().map(|id| (id, 0)));
    max_param_error(&model.params, &sampled, loss)
}
