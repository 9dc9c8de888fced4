//! Synthetic infrared scenes and on-disk dataset handling.
//!
//! Scenes are grayscale backgrounds in one of three clutter regimes (sky,
//! maritime, ground) with small Gaussian targets stamped on top. The mask
//! marks pixels at or above half of a target's peak contribution. Datasets
//! live as 8-bit PNGs under `images/` and `masks/` with id lists under
//! `splits/` and an optional `scenarios.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Sky,
    Maritime,
    Ground,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Sky, Scenario::Maritime, Scenario::Ground];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Sky => "sky",
            Scenario::Maritime => "maritime",
            Scenario::Ground => "ground",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "sky" => Ok(Scenario::Sky),
            "maritime" => Ok(Scenario::Maritime),
            "ground" => Ok(Scenario::Ground),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected sky, maritime or ground)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Grayscale image in [0, 1], [H, W].
    pub image: Array2<f64>,
    /// Binary target mask, [H, W].
    pub mask: Array2<u8>,
    pub scenario: Option<Scenario>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub scenario: Scenario,
    pub size: (usize, usize),
    /// Inclusive range of targets per scene.
    pub n_targets: (usize, usize),
    /// Target Gaussian radius range, pixels.
    pub target_sigma: (f64, f64),
    /// Target peak contrast range above the local background.
    pub target_contrast: (f64, f64),
    /// Additive sensor noise.
    pub noise_std: f64,
}

impl SceneSpec {
    pub fn default_for(scenario: Scenario, size: (usize, usize)) -> SceneSpec {
        SceneSpec {
            scenario,
            size,
            n_targets: (1, 3),
            target_sigma: (0.7, 1.6),
            target_contrast: (0.35, 0.7),
            noise_std: 0.02,
        }
    }
}

fn smooth_blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize, sigma_frac: (f64, f64), amp: f64) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((h, w));
    for _ in 0..count {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let s = rng.gen_range(sigma_frac.0..sigma_frac.1) * h.min(w) as f64;
        let a = rng.gen_range(-amp..amp);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out[[y, x]] += a * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    out
}

fn background(rng: &mut ChaCha8Rng, scenario: Scenario, h: usize, w: usize) -> Array2<f64> {
    match scenario {
        Scenario::Sky => {
            // smooth vertical gradient with dim cloud blobs
            let top = rng.gen_range(0.25..0.45);
            let bottom = rng.gen_range(0.05..0.2);
            let mut bg = Array2::from_shape_fn((h, w), |(y, _)| {
                top + (bottom - top) * y as f64 / h.max(2) as f64
            });
            bg += &smooth_blobs(rng, h, w, 3, (0.15, 0.35), 0.08);
            bg
        }
        Scenario::Maritime => {
            // bright sky band over darker sea with horizontal wave streaks
            let horizon = (h as f64 * rng.gen_range(0.25..0.4)) as usize;
            let sky = rng.gen_range(0.4..0.55);
            let sea = rng.gen_range(0.12..0.22);
            let freq = rng.gen_range(0.35..0.9);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            Array2::from_shape_fn((h, w), |(y, _)| {
                if y < horizon {
                    sky - 0.05 * y as f64 / horizon.max(1) as f64
                } else {
                    sea + 0.05 * ((y as f64) * freq + phase).sin()
                }
            })
        }
        Scenario::Ground => {
            // high-variance terrain clutter from many strong blobs
            let base = rng.gen_range(0.25..0.4);
            let mut bg = Array2::from_elem((h, w), base);
            bg += &smooth_blobs(rng, h, w, 40, (0.04, 0.15), 0.3);
            bg
        }
    }
}

/// Stamp targets onto `bg`, returning the half-peak mask.
fn place_targets(rng: &mut ChaCha8Rng, spec: &SceneSpec, bg: &mut Array2<f64>) -> Array2<u8> {
    let (h, w) = bg.dim();
    let n = rng.gen_range(spec.n_targets.0..=spec.n_targets.1);
    let mut mask = Array2::<u8>::zeros((h, w));
    let margin = 4.0;
    let mut centers: Vec<(f64, f64)> = Vec::new();
    for _ in 0..n {
        let mut placed = None;
        for _attempt in 0..50 {
            let cy = rng.gen_range(margin..h as f64 - margin);
            let cx = rng.gen_range(margin..w as f64 - margin);
            if centers.iter().all(|&(y, x)| (y - cy).powi(2) + (x - cx).powi(2) > 100.0) {
                placed = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = placed else { continue };
        centers.push((cy, cx));
        let sigma = rng.gen_range(spec.target_sigma.0..spec.target_sigma.1);
        let peak = rng.gen_range(spec.target_contrast.0..spec.target_contrast.1);
        let r = (3.0 * sigma).ceil() as isize + 1;
        for dy in -r..=r {
            for dx in -r..=r {
                let y = cy.round() as isize + dy;
                let x = cx.round() as isize + dx;
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = peak * (-d2 / (2.0 * sigma * sigma)).exp();
                bg[[y as usize, x as usize]] += v;
                if v >= 0.5 * peak {
                    mask[[y as usize, x as usize]] = 1;
                }
            }
        }
    }
    mask
}

/// Generate one scene deterministically from the RNG state.
pub fn synth_scene(spec: &SceneSpec, id: &str, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = spec.size;
    let mut img = background(rng, spec.scenario, h, w);
    let mask = place_targets(rng, spec, &mut img);
    if spec.noise_std > 0.0 {
        let noise = crate::nn::normal(rng, &[h, w], spec.noise_std);
        for (v, n) in img.iter_mut().zip(noise.iter()) {
            *v += n;
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Sample {
        id: id.to_string(),
        image: img,
        mask,
        scenario: Some(spec.scenario),
    }
}

// ---- PNG + dataset layout ----------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.to_path_buf(), source)
}

pub fn save_gray_png(path: &Path, data: &Array2<f64>) -> Result<()> {
    let (h, w) = data.dim();
    let bytes: Vec<u8> = data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer size matches dimensions");
    img.save(path).map_err(Error::from)
}

pub fn load_gray_png(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    }))
}

/// Write a dataset directory: `images/`, `masks/`, `splits/{train,test}.txt`
/// and `scenarios.csv`.
pub fn save_dataset(dir: &Path, samples: &[Sample], train_ids: &[String], test_ids: &[String]) -> Result<()> {
    for sub in ["images", "masks", "splits"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir.join(sub), e))?;
    }
    let mut scen_rows = String::from("id,scenario\n");
    for s in samples {
        save_gray_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        let maskf = s.mask.mapv(|v| v as f64);
        save_gray_png(&dir.join("masks").join(format!("{}.png", s.id)), &maskf)?;
        if let Some(sc) = s.scenario {
            scen_rows.push_str(&format!("{},{}\n", s.id, sc.as_str()));
        }
    }
    let write = |p: PathBuf, content: &str| -> Result<()> {
        fs::write(&p, content).map_err(|e| io_err(&p, e))
    };
    write(dir.join("splits/train.txt"), &(train_ids.join("\n") + "\n"))?;
    write(dir.join("splits/test.txt"), &(test_ids.join("\n") + "\n"))?;
    write(dir.join("scenarios.csv"), &scen_rows)
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn read_scenarios(dir: &Path) -> Result<std::collections::HashMap<String, Scenario>> {
    let path = dir.join("scenarios.csv");
    let mut map = std::collections::HashMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (id, sc) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("scenarios.csv line {}: '{line}'", i + 1)))?;
        map.insert(id.trim().to_string(), Scenario::parse(sc.trim())?);
    }
    Ok(map)
}

fn load_split(dir: &Path, ids: &[String], scenarios: &std::collections::HashMap<String, Scenario>) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = dir.join("images").join(format!("{id}.png"));
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        if !img_path.exists() {
            return Err(Error::MissingFile(img_path));
        }
        if !mask_path.exists() {
            return Err(Error::MissingFile(mask_path));
        }
        let image = load_gray_png(&img_path)?;
        let mask_f = load_gray_png(&mask_path)?;
        if image.dim() != mask_f.dim() {
            return Err(Error::Data(format!(
                "id '{id}': image {:?} vs mask {:?}",
                image.dim(),
                mask_f.dim()
            )));
        }
        let mask = mask_f.mapv(|v| u8::from(v >= 0.5));
        out.push(Sample {
            id: id.clone(),
            image,
            mask,
            scenario: scenarios.get(id).copied(),
        });
    }
    Ok(out)
}

/// Load (train, test) from a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let scenarios = read_scenarios(dir)?;
    let train_ids = read_ids(&dir.join("splits/train.txt"))?;
    let test_ids = read_ids(&dir.join("splits/test.txt"))?;
    Ok((
        load_split(dir, &train_ids, &scenarios)?,
        load_split(dir, &test_ids, &scenarios)?,
    ))
}

/// Generate a multi-scenario dataset and write it to `dir`. Scenarios
/// round-robin over `specs`; a `train_frac` share of each scenario goes to
/// the train split.
pub fn synth_dataset(dir: &Path, specs: &[SceneSpec], count: usize, train_frac: f64, seed: u64) -> Result<Vec<Sample>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let spec = &specs[i % specs.len()];
        let id = format!("{}_{i:05}", spec.scenario.as_str());
        samples.push(synth_scene(spec, &id, &mut rng));
    }
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    let per_spec = count.div_ceil(specs.len());
    let train_per_spec = ((train_frac * per_spec as f64).round() as usize).min(per_spec);
    for (i, s) in samples.iter().enumerate() {
        let rank = i / specs.len();
        if rank < train_per_spec {
            train_ids.push(s.id.clone());
        } else {
            test_ids.push(s.id.clone());
        }
    }
    save_dataset(dir, &samples, &train_ids, &test_ids)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scene_is_deterministic_and_in_range() {
        let spec = SceneSpec::default_for(Scenario::Sky, (64, 64));
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = synth_scene(&spec, "a", &mut r1);
        let b = synth_scene(&spec, "a", &mut r2);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.mask.iter().any(|&m| m == 1), "expected at least one target");
    }

    #[test]
    fn mask_is_small_and_on_bright_spots() {
        let spec = SceneSpec::default_for(Scenario::Maritime, (64, 64));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = synth_scene(&spec, "m", &mut rng);
        let area: usize = s.mask.iter().map(|&v| v as usize).sum();
        assert!(area > 0 && area < 64 * 64 / 50, "target area {area} out of range");
    }

    #[test]
    fn scenario_backgrounds_differ_statistically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut var = |sc: Scenario| {
            let mut spec = SceneSpec::default_for(sc, (64, 64));
            spec.n_targets = (0, 0);
            spec.noise_std = 0.0;
            let img = synth_scene(&spec, "v", &mut rng).image;
            let m = img.mean().unwrap();
            img.mapv(|v| (v - m) * (v - m)).mean().unwrap()
        };
        let ground = var(Scenario::Ground);
        let sky = var(Scenario::Sky);
        assert!(ground > sky, "ground clutter {ground} should exceed sky {sky}");
    }

    #[test]
    fn dataset_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let specs: Vec<SceneSpec> = Scenario::ALL
            .iter()
            .map(|&sc| SceneSpec::default_for(sc, (32, 32)))
            .collect();
        let samples = synth_dataset(tmp.path(), &specs, 9, 0.67, 11).unwrap();
        assert_eq!(samples.len(), 9);
        let (train, test) = load_dataset(tmp.path()).unwrap();
        assert_eq!(train.len() + test.len(), 9);
        assert!(!train.is_empty() && !test.is_empty());
        let orig: std::collections::HashMap<_, _> = samples.iter().map(|s| (s.id.clone(), s)).collect();
        for s in train.iter().chain(test.iter()) {
            let o = orig[&s.id];
            assert_eq!(s.mask, o.mask, "mask round trip for {}", s.id);
            assert_eq!(s.scenario, o.scenario);
            // 8-bit quantization: within half a step
            let max_err = s
                .image
                .iter()
                .zip(o.image.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-12, "quantization error {max_err}");
        }
    }

    #[test]
    fn missing_id_is_reported_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        let specs = [SceneSpec::default_for(Scenario::Sky, (32, 32))];
        synth_dataset(tmp.path(), &specs, 2, 0.5, 3).unwrap();
        std::fs::write(tmp.path().join("splits/train.txt"), "nope\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("nope"), "error was: {err}");
    }
}
