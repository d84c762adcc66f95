use scsd_core::autodiff::no_grad;
use scsd_core::config::RunConfig;
use scsd_core::pipeline::dataset::generate_dataset;
use scsd_core::pipeline::train::{usable_samples, Trainer};
use scsd_core::pipeline::{ForwardMode, SegModel};
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let domains = cfg.ordered_domains();
    let samples = usable_samples(
        generate_dataset(&domains[..2], 8, cfg.dataset.layout_seed, 64).unwrap(),
    );
    let model = SegModel::new(&cfg).unwrap();

    // Forward-only timing (eval graph, no tape).
    let t0 = Instant::now();
    for _ in 0..10 {
        no_grad(|| model.forward(&samples[0], ForwardMode::Eval)).unwrap();
    }
    println!("eval fwd (incl backbone): {:.1} ms", t0.elapsed().as_secs_f64() * 100.0);

    let mut trainer = Trainer::new(model, samples).unwrap();
    trainer.train_step().unwrap();
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        trainer.train_step().unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("full config: {:.3} s/step -> 2k steps = {:.1} min", dt, dt * 2000.0 / 60.0);

    // Baseline flags (ablation row 1) timing.
    let mut cfg2 = RunConfig::default();
    cfg2.ablation.sqb = false;
    cfg2.ablation.tdst = false;
    cfg2.ablation.sso = false;
    let samples2 = usable_samples(
        generate_dataset(&cfg2.ordered_domains()[..2], 8, cfg2.dataset.layout_seed, 64).unwrap(),
    );
    let mut t2 = Trainer::new(SegModel::new(&cfg2).unwrap(), samples2).unwrap();
    t2.train_step().unwrap();
    let t0 = Instant::now();
    for _ in 0..n {
        t2.train_step().unwrap();
    }
    let dt2 = t0.elapsed().as_secs_f64() / n as f64;
    println!("baseline config: {:.3} s/step -> 2k steps = {:.1} min", dt2, dt2 * 2000.0 / 60.0);
}
