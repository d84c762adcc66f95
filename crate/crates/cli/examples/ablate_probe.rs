use scsd_cli::commands::cmd_ablate;
use scsd_core::config::RunConfig;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::ablation_default();
    let t0 = Instant::now();
    let out = std::env::temp_dir().join("scsd_ablate_probe");
    let summary = cmd_ablate(&cfg, &out, 0, 1).unwrap();
    for row in &summary.rows {
        let r = &row.runs[0];
        println!(
            "{:<16} held-out {:5.1}%  train {:5.1}%  (layer1 {:5.1}%)",
            row.name,
            r.held_out_mean * 100.0,
            r.train_miou * 100.0,
            r.train_miou_layer1 * 100.0
        );
    }
    println!("elapsed: {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
}
