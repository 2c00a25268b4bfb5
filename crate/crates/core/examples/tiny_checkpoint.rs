//! Writes a checkpoint of the smallest valid model; used to seed the
//! checkpoint fuzzer: `cargo run --example tiny_checkpoint -- fuzz/corpus/checkpoint_decode/tiny`.

use bevbeam::data::checkpoint::save_checkpoint;
use bevbeam::fusion_model::{BevFusionModel, ModelConfig};
use bevbeam::training::TrainState;
fn main() {
    let cfg = ModelConfig {
        grid: 8,
        c_bev: 4,
        c_back: 4,
        camera_size: 16,
        xattn_layers: 1,
        xattn_heads: 1,
        temporal_layers: 1,
        temporal_heads: 1,
        gps_hidden: 4,
        head_hidden: 4,
        beams: 4,
        ..ModelConfig::default()
    };
    let m = BevFusionModel::<f32>::new(cfg, 1).unwrap();
    let s = TrainState::new(&m.store, 1);
    save_checkpoint(
        std::path::Path::new(&std::env::args().nth(1).unwrap()),
        &m,
        &s,
    )
    .unwrap();
}
