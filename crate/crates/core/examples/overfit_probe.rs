use scsd_core::config::RunConfig;
use scsd_core::pipeline::dataset::{generate_dataset, quantize_images, CLASS_NAMES};
use scsd_core::pipeline::eval::evaluate_miou;
use scsd_core::pipeline::train::{usable_samples, Trainer};
use scsd_core::pipeline::SegModel;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let domains = cfg.ordered_domains();
    let mut samples = generate_dataset(&domains[..1], 4, cfg.dataset.layout_seed, 64).unwrap();
    quantize_images(&mut samples);
    let samples = usable_samples(samples);
    let model = SegModel::new(&cfg).unwrap();
    let mut trainer = Trainer::new(model, samples.clone()).unwrap();
    let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();

    let t0 = Instant::now();
    let mut initial = 0.0;
    for step in 0..300 {
        let m = trainer.train_step().unwrap();
        if step == 0 { initial = m.total; }
        if (step + 1) % 50 == 0 {
            let report = evaluate_miou(&trainer.model, &samples, &names).unwrap();
            println!("step {:>3}  total {:8.3}  frac {:5.3}  mIoU {:5.1}%  ({:.0}s)",
                step + 1, m.total, m.total / initial, report.miou * 100.0, t0.elapsed().as_secs_f64());
        }
    }
}
