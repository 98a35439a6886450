//! Times one training step (forward, loss, backward) of the `small` model on
//! a synthetic 128x128 study.

use std::time::Instant;

use mammoclu::backbone::Preset;
use mammoclu::fusion::{OverlayMode, ViewAttentionMode};
use mammoclu::graph::Graph;
use mammoclu::imaging::Image;
use mammoclu::loss::{composite_loss_graph, LossWeights};
use mammoclu::model::{Model, ModelConfig};

fn main() {
    let cfg = ModelConfig {
        global: Preset::Small.config(),
        local: Preset::Small.config(),
        image_size: (128, 128),
        num_patches: 4,
        patch_size: (32, 32),
        dim: None,
        overlay: OverlayMode::Sum,
        view_attention: ViewAttentionMode::Attention,
        zero_residual: true,
    };
    let model = Model::new(&cfg, 0).unwrap();
    println!("parameters: {}", model.params.scalar_count());
    let views: Vec<Image> = (0..4)
        .map(|v| {
            let g: Vec<f64> = (0..128 * 128).map(|i| ((i * 37 + v * 11) % 255) as f64 / 255.0).collect();
            Image::from_gray(128, 128, &g).unwrap()
        })
        .collect();
    for _ in 0..3 {
        let start = Instant::now();
        let mut g = Graph::new(&model.params);
        let vars = model.arch.study_forward(&mut g, &views, None).unwrap();
        let forward = start.elapsed();
        let (root, loss) = composite_loss_graph(&mut g, &vars, 1, &LossWeights::default()).unwrap();
        g.backward(root);
        println!(
            "forward {forward:?}, step {:?}, loss {:.4}, tape nodes {}",
            start.elapsed(),
            loss.total,
            g.len()
        );
    }
}
