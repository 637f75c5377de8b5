//! Prints the feature-map shape trace of the default and tiny networks.

use prmnet::data::DatasetStats;
use prmnet::model::{ArchConfig, ModelState, Net, Normalization};
use prmnet::tensor::{Mode, Tensor};

fn trace(name: &str, arch: &ArchConfig) -> prmnet::Result<()> {
    let state = ModelState::init(
        arch,
        DatasetStats { cc_max: 1 },
        Normalization::default(),
        0,
    )?;
    let s = arch.input_size;
    let patch = Tensor::full(&[3, s, s], 128.0);
    let mut net = Net::new(&state, Mode::Eval)?;
    let mut prefix = net.stem(&[&patch])?;
    net.to_hook(&mut prefix)?;
    net.continue_routes(&prefix, &[0], &[&patch])?;
    println!("{name}: {} parameters", state.param_count());
    for (label, shape) in net.shapes() {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        println!("  {label:<12} {}", dims.join("×"));
    }
    Ok(())
}

fn main() -> prmnet::Result<()> {
    trace("default", &ArchConfig::default())?;
    trace("tiny", &ArchConfig::tiny())
}
