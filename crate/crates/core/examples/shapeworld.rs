//! Generates the same novel classes in every built-in domain, prints one image
//! per domain as ASCII art and samples a 5-way 5-shot episode.
//!
//!     cargo run --example shapeworld

use refine::data::{generate_shapeworld, sample_episode, split_classes, Dataset, DomainSpec, Split};
use refine::rng;

fn ascii(ds: &Dataset, i: usize) -> String {
    const RAMP: &[u8] = b" .:-=+*#%@";
    let (h, w) = (ds.height, ds.width);
    let img = ds.image(i);
    let mut out = String::new();
    for y in (0..h).step_by(2) {
        for x in 0..w {
            let lum: u32 = (0..ds.channels).map(|c| img[c * h * w + y * w + x] as u32).sum::<u32>() / ds.channels as u32;
            out.push(RAMP[(lum as usize * (RAMP.len() - 1)) / 255] as char);
        }
        out.push('\n');
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (base, novel) = split_classes(20, 20, 0)?;
    println!("base classes  {base:?}\nnovel classes {novel:?}\n");

    let domains = std::iter::once(DomainSpec::identity("source")).chain(DomainSpec::targets());
    let mut last = None;
    for domain in domains {
        let ds = generate_shapeworld(&domain, &novel, 30, 32, Split::Novel, 0)?;
        println!("{} ({}): {}", domain.name, refine::data::format_chain(&domain.transforms), ds.class_names[0]);
        println!("{}", ascii(&ds, 0));
        last = Some(ds);
    }

    let ds = last.expect("at least one domain");
    let episode = sample_episode(&ds, 5, 5, 15, &mut rng::stream(0, "episode", 0))?;
    let classes: Vec<&str> = episode.class_map.iter().map(|&c| ds.class_names[c].as_str()).collect();
    println!("episode classes: {}", classes.join(", "));
    println!("support {} images, query {} images", episode.support.len(), episode.query.len());
    Ok(())
}
