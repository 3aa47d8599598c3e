//! Compares nearest, bilinear and a trained EDSR on held-out synthetic scenes.
//!
//! `cargo run --example upscale_study -- [epochs] [train_scenes] [channels] [blocks] [lr]`

use campseg::synthcamp::{degrade, generate_scene, SceneConfig};
use campseg::tiler::{extract_patches, EdgePolicy, RegionRole, RegionSpec, TileSpec, Window};
use campseg::upscale::{mean_psnr, train_edsr, upscale, EdsrConfig, EdsrTrainConfig, UpscaleMethod};
use campseg::RasterGrid;

fn patches(seed: u64, size: usize) -> Vec<RasterGrid> {
    let scene = generate_scene(&SceneConfig {
        width: 128,
        height: 128,
        dwelling_count: 40,
        seed,
        ..SceneConfig::default()
    })
    .unwrap();
    let region = RegionSpec {
        name: "all".into(),
        role: RegionRole::TrainLarge,
        window: Window::full(&scene.image),
    };
    extract_patches(&scene.image, &scene.geo, &region, &TileSpec::new(size, size, EdgePolicy::Snap).unwrap(), None)
        .unwrap()
        .into_iter()
        .map(|p| p.image)
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).map_or(d, |s| s.parse().unwrap());
    let epochs = arg(0, 30.0) as usize;
    let scenes = arg(1, 4.0) as u64;
    let cfg = EdsrConfig {
        feature_channels: arg(2, 16.0) as usize,
        residual_blocks: arg(3, 8.0) as usize,
        ..EdsrConfig::default()
    };
    let lr = arg(4, 1e-3);
    let pairs = |hr: Vec<RasterGrid>| -> Vec<(RasterGrid, RasterGrid)> {
        hr.into_iter().map(|h| (degrade(&h, 4).unwrap(), h)).collect()
    };
    let train: Vec<_> = (0..scenes).flat_map(|s| pairs(patches(100 + s, 32))).collect();
    let test = pairs(patches(9999, 32));
    let t = std::time::Instant::now();
    let (params, losses) = train_edsr(
        &train,
        &cfg,
        &EdsrTrainConfig {
            epochs,
            lr_init: lr,
            ..EdsrTrainConfig::default()
        },
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    for m in [UpscaleMethod::Nearest, UpscaleMethod::Bilinear, UpscaleMethod::Edsr] {
        let ups: Vec<RasterGrid> = test.iter().map(|(lo, _)| upscale(lo, m, 4, Some((&params, &cfg))).unwrap()).collect();
        let psnr = mean_psnr(test.iter().map(|(_, hr)| hr).zip(&ups)).unwrap();
        println!("{m:?}\t{psnr:.3}");
    }
    println!("{} pairs, final loss {:.5}, {secs:.1}s", train.len(), losses.last().unwrap());
}
