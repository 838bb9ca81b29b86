//! Output-directory plumbing: atomic writes, versioned CSV files and bounded parallel jobs.

use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.partial-{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, &target)?;
    Ok(target)
}

/// CSV text with a leading `# schema` comment that versions the column layout.
pub fn csv(schema: &str, header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("# {schema}\n{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Applies `f` to every item on at most `jobs` threads; results keep the input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool starts")
        .install(|| items.par_iter().map(f).collect())
}
