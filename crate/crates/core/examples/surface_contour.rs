//! Two-instance gradient surfaces, written as CSV and summarised along the
//! diagonal.

use sharp_mil::gradlab;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 201;
    let surface = gradlab::surface_m2(n, 0.005, 0.995)?;
    let path = std::env::temp_dir().join("smil_surface.csv");
    gradlab::export_surface(&surface, &path)?;
    println!("wrote {} rows to {}", n * n, path.display());

    println!("{:>8} {:>14} {:>14}", "p", "traditional", "sharp");
    for i in (0..n).step_by(25) {
        let at = i * n + i;
        println!(
            "{:>8.3} {:>14.6} {:>14.6}",
            surface.axis[i], surface.traditional[at], surface.sharp[at]
        );
    }
    Ok(())
}
