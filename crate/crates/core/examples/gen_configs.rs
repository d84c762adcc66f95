use scsd_core::config::RunConfig;
fn main() {
    std::fs::write("configs/default.toml", RunConfig::default().to_toml()).unwrap();
    std::fs::write("configs/ablation.toml", RunConfig::ablation_default().to_toml()).unwrap();
    println!("written");
}
