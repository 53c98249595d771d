//! `gradcomp perf-model`: throughput projections per profile.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gradcomp::perfmodel::{breakeven_inter_bandwidth, speedup, sweep, write_csv, ClusterSpec, ModelProfile};
use gradcomp::SchemeDescriptor;

use crate::scheme::SchemeSpec;
use crate::UsageError;

/// Default comparison set: uncompressed, 2/4/8-bit single scale, a two-scale
/// variant and random-K at the same widths.
pub const DEFAULT_SCHEMES: [&str; 8] = [
    "allreduce-sgd",
    "qsgd-mn:2",
    "qsgd-mn:4",
    "qsgd-mn:8",
    "qsgd-mn-ts:6,10",
    "grandk-mn:2",
    "grandk-mn:4",
    "grandk-mn:8",
];

/// A shipped profile name or a path to a TOML profile.
pub fn load_profile(arg: &str) -> Result<ModelProfile> {
    match arg {
        "resnet50-like" => Ok(ModelProfile::resnet50_like()),
        "vgg16-like" => Ok(ModelProfile::vgg16_like()),
        path => {
            let text = fs::read_to_string(path).map_err(|e| {
                UsageError(format!("{path:?} is neither resnet50-like, vgg16-like nor a readable profile file: {e}"))
            })?;
            let p: ModelProfile =
                toml::from_str(&text).map_err(|e| UsageError(format!("invalid profile {path}:\n{e}")))?;
            p.validate().map_err(|e| UsageError(format!("profile {path}: {e}")))?;
            Ok(p)
        }
    }
}

pub fn load_cluster(path: &Path) -> Result<ClusterSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read cluster file {}: {e}", path.display())))?;
    let c: ClusterSpec =
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid cluster file {}:\n{e}", path.display())))?;
    c.validate().map_err(|e| UsageError(format!("cluster file {}: {e}", path.display())))?;
    Ok(c)
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Sweep each profile and write `perf-<profile>.csv`; returns the files.
pub fn run(
    profiles: &[ModelProfile],
    cluster: &ClusterSpec,
    specs: &[SchemeSpec],
    workers: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    for &w in workers {
        cluster.with_workers(w).map_err(|e| UsageError(e.to_string()))?;
    }
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    // Inter-node bandwidth only matters once the job spans several nodes.
    let widest = workers.iter().copied().max().unwrap_or(cluster.workers());
    let mut files = Vec::new();
    for profile in profiles {
        let schemes: Vec<SchemeDescriptor> = specs
            .iter()
            .map(|s| s.descriptor(profile.n_params as usize))
            .collect::<Result<_>>()
            .map_err(|e| UsageError(format!("{e:#}")))?;
        let points = sweep(profile, cluster, &schemes, workers)?;
        let path = out_dir.join(format!("perf-{}.csv", file_stem(&profile.name)));
        let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        write_csv(&points, BufWriter::new(f))?;

        println!("{} ({} parameters, {:.3} s compute per batch)", profile.name, profile.n_params, profile.compute_sec_per_batch);
        print!("  {:<20}", "scheme \\ workers");
        for w in workers {
            print!("{w:>10}");
        }
        println!("  breakeven GB/s at {widest}");
        for scheme in &schemes {
            print!("  {:<20}", scheme.label());
            for &w in workers {
                print!("{:>9.2}x", speedup(profile, &cluster.with_workers(w)?, scheme)?);
            }
            let breakeven = match scheme {
                SchemeDescriptor::Uncompressed => "-".to_string(),
                s => match breakeven_inter_bandwidth(profile, &cluster.with_workers(widest)?, s)? {
                    Some(b) => format!("{:.3}", b / 1e9),
                    // No crossing: one side wins at every bandwidth.
                    None if speedup(profile, &cluster.with_workers(widest)?, s)? > 1.0 => "always faster".into(),
                    None => "never faster".into(),
                },
            };
            println!("{breakeven:>20}");
        }
        println!("  speedup over allreduce-sgd; wrote {}", path.display());
        files.push(path);
    }
    Ok(files)
}
