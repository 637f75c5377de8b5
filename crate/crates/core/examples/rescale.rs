//! Shows what the patch rescaler emits for each crowd class.

use prmnet::data::{generate_synthetic, CrowdClass};
use prmnet::prm::Prm;
use prmnet::tiling::tile_image;

fn main() -> prmnet::Result<()> {
    let record = generate_synthetic(1, (256, 256), (30, 30), 5)?.remove(0);
    let tile = &tile_image(&record)[0];
    let prm = Prm::new(256, Default::default())?;
    for class in CrowdClass::ALL {
        let out = prm.rescale(&tile.pixels, class)?;
        print!("{class}: {} patch(es)", out.patches.len());
        for (p, route) in out.patches.iter().zip(&out.provenance) {
            let points = prm.map_points(&tile.points, *route);
            print!("  [{route:?} {:?}, {} heads]", p.shape(), points.len());
        }
        println!();
    }
    Ok(())
}
