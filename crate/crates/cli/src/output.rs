//! Output files. Every file is written to a temporary sibling and renamed
//! into place, so readers never see a partial file.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use dastack_core::adapt::History;
use dastack_core::nn::FitEpoch;
use dastack_core::stack::Evaluation;

use crate::CliError;

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| {
        CliError::Core(dastack_core::Error::Io(format!("{}: {e}", path.display())))
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn history_csv(h: &History) -> String {
    let mut s = String::from("epoch,class_loss,adapt_loss,lr,source_acc,target_acc\n");
    for r in h {
        let t = r.target_acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.class_loss, r.adapt_loss, r.lr, r.source_acc, t
        );
    }
    s
}

/// One row per model: `name,split,accuracy,seed`.
pub fn metrics_csv(rows: &[(&str, &str, f64)], seed: u64) -> String {
    let mut s = String::from("name,split,accuracy,seed\n");
    for (name, split, acc) in rows {
        let _ = writeln!(s, "{name},{split},{acc},{seed}");
    }
    s
}

pub fn ablation_csv(rows: &[(&str, f64)], seed: u64) -> String {
    let mut s = String::from("name,test_accuracy,seed\n");
    for (name, acc) in rows {
        let _ = writeln!(s, "{name},{acc},{seed}");
    }
    s
}

/// C rows of C counts; row = true class, column = predicted class.
pub fn confusion_csv(e: &Evaluation) -> String {
    let mut s = String::new();
    for row in &e.confusion {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Per-epoch curves for every base and the meta network. `fit_acc` is the
/// accuracy on the rows the model was fitted to; `target_acc` is the
/// monitored accuracy on the target train split, when its labels exist.
pub fn curves_csv(bases: &[(&str, &History)], meta: &[FitEpoch]) -> String {
    let mut s = String::from("model,epoch,fit_acc,target_acc\n");
    for (name, h) in bases {
        for r in h.iter() {
            let t = r.target_acc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{name},{},{},{t}", r.epoch, r.source_acc);
        }
    }
    for r in meta {
        let _ = writeln!(s, "Stack,{},{},", r.epoch, r.accuracy);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.csv");
        write_atomic(&p, b"a\n").unwrap();
        write_atomic(&p, b"b\n").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "b\n");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn confusion_rows() {
        let e = Evaluation {
            accuracy: 0.5,
            confusion: vec![vec![1, 1], vec![0, 2]],
        };
        assert_eq!(confusion_csv(&e), "1,1\n0,2\n");
    }
}
