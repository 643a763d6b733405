//! Writes random primitives to a .splat file, reads them back and shows the
//! error a truncated file produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatforge::gaussians::{
    decode_splat, encode_splat, read_splat, write_splat, GaussianPrimitive, GaussianSet, Provenance,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = GaussianSet::new(Provenance::Dense);
    for _ in 0..1000 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        set.push(GaussianPrimitive {
            mean: std::array::from_fn(|_| rng.gen_range(-5.0..5.0)),
            rotation: q.map(|v| v / n),
            scale: std::array::from_fn(|_| rng.gen_range(0.01..0.5)),
            opacity: rng.gen(),
            color: std::array::from_fn(|_| rng.gen()),
        });
    }
    let path = std::env::temp_dir().join("splatforge_random.splat");
    write_splat(&set, &path)?;
    let back = read_splat(&path)?;
    let worst = set
        .primitives
        .iter()
        .zip(&back.primitives)
        .flat_map(|(a, b)| a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    println!(
        "{} primitives, {} bytes, worst mean error {worst:.2e}",
        back.len(),
        std::fs::metadata(&path)?.len()
    );

    let bytes = encode_splat(&set);
    match decode_splat(&bytes[..bytes.len() - 7]) {
        Ok(_) => println!("truncated file unexpectedly decoded"),
        Err(e) => println!("truncated file rejected: {e}"),
    }
    Ok(())
}
