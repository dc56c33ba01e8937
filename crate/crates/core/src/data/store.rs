use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{Dataset, DatasetManifest, DatasetSpec, MANIFEST_VERSION};
use crate::envs::{generate_transitions, Action, ControlMode};
use crate::error::{Error, Result};

const FILES: [&str; 6] = ["obs.bin", "flow_rgb.bin", "flow_uv.bin", "masks.bin", "actions.bin", "episodes.bin"];

impl Dataset {
    /// Generates the dataset described by `spec` in memory.
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        let labeling = spec.labeling();
        let stream = generate_transitions(&spec.env, spec.n_transitions, spec.policy, labeling, spec.seed)?;
        let mut ds = Dataset::from_transitions(&spec.env, stream, spec.test_fraction, spec.seed)?;
        ds.manifest.policy = Some(spec.policy);
        ds.manifest.seed = Some(spec.seed);
        ds.manifest.flow_source = Some(labeling);
        ds.record_ratio_splits(&spec.ratios, &spec.ratio_seeds)?;
        Ok(ds)
    }
}

/// Generates and writes a dataset, returning its manifest.
pub fn generate_dataset(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let ds = Dataset::generate(spec)?;
    write_dataset(&ds, dir)?;
    Ok(ds.manifest)
}

fn write_file(dir: &Path, name: &str, bytes: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let path = dir.join(name);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    bytes(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(dir, "obs.bin", |w| w.write_all(&ds.obs))?;
    write_file(dir, "flow_rgb.bin", |w| w.write_all(&ds.flow_rgb))?;
    write_file(dir, "flow_uv.bin", |w| {
        ds.flow_uv.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))
    })?;
    write_file(dir, "masks.bin", |w| w.write_all(&ds.masks))?;
    write_file(dir, "actions.bin", |w| {
        ds.actions.iter().try_for_each(|a| match *a {
            Action::Discrete(i) => w.write_all(&(i as u16).to_le_bytes()),
            Action::Continuous(dx, dy) => {
                w.write_all(&dx.to_le_bytes())?;
                w.write_all(&dy.to_le_bytes())
            }
        })
    })?;
    write_file(dir, "episodes.bin", |w| {
        ds.episode_starts.iter().try_for_each(|s| w.write_all(&s.to_le_bytes()))
    })?;
    // manifest last, so a directory with a manifest is complete
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn read_sized(dir: &Path, name: &str, expected: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected {
        return Err(Error::Corruption {
            file: path,
            detail: format!("{} bytes, manifest implies {expected}", bytes.len()),
        });
    }
    Ok(bytes)
}

/// Loads a dataset, checking every binary against the manifest counts.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corruption {
        file: mpath.clone(),
        detail: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    manifest.env.validate()?;
    let n = manifest.counts.transitions;
    let e = manifest.counts.episodes;
    let px = manifest.env.width * manifest.env.height;
    let corrupt = |file: &str, detail: String| Error::Corruption {
        file: dir.join(file),
        detail,
    };
    if manifest.episode_tasks.len() != e {
        return Err(corrupt("manifest.json", "episode_tasks length differs from episode count".into()));
    }

    let obs = read_sized(dir, FILES[0], n * 2 * px * 3)?;
    let flow_rgb = read_sized(dir, FILES[1], n * px * 3)?;
    let flow_uv = read_sized(dir, FILES[2], n * px * 8)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let masks = read_sized(dir, FILES[3], n * px)?;
    let actions = match manifest.env.control_mode {
        ControlMode::Discrete5 => read_sized(dir, FILES[4], n * 2)?
            .chunks_exact(2)
            .map(|c| {
                let i = u16::from_le_bytes([c[0], c[1]]);
                u8::try_from(i)
                    .ok()
                    .filter(|&i| (i as usize) < crate::envs::N_DISCRETE_ACTIONS)
                    .map(Action::Discrete)
                    .ok_or_else(|| corrupt(FILES[4], format!("action index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?,
        ControlMode::Continuous2d => read_sized(dir, FILES[4], n * 8)?
            .chunks_exact(8)
            .map(|c| {
                Action::Continuous(
                    f32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect(),
    };
    let episode_starts: Vec<u32> = read_sized(dir, FILES[5], e * 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ordered = episode_starts.first() == Some(&0) && episode_starts.windows(2).all(|w| w[0] < w[1]);
    if n > 0 && (!ordered || episode_starts.last().is_some_and(|&s| s as usize >= n)) {
        return Err(corrupt(FILES[5], "episode offsets not strictly increasing from 0".into()));
    }
    let all_eps = manifest.splits.train.iter().chain(&manifest.splits.test);
    if all_eps.clone().any(|&x| x as usize >= e) {
        return Err(corrupt("manifest.json", "split references a missing episode".into()));
    }
    Ok(Dataset {
        manifest,
        obs,
        flow_rgb,
        flow_uv,
        masks,
        actions,
        episode_starts,
    })
}
