//! Output directory bookkeeping: data files, the run manifest and plot scripts.

use std::path::{Path, PathBuf};

use hystkit::{Error, Result, TimeSeries};
use serde::Serialize;

pub const MANIFEST: &str = "manifest.toml";
pub const PLOT_SCRIPT: &str = "plot.gp";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

/// Files written by one run, relative to `root`.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(io(root))?;
        Ok(Self {
            root: root.to_owned(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(io(parent))?;
        }
        std::fs::write(&p, text).map_err(io(&p))?;
        self.outputs.push(rel.to_owned());
        Ok(())
    }

    pub fn write_series(&mut self, rel: &str, ts: &TimeSeries) -> Result<()> {
        self.write_text(rel, &ts.to_csv_string())
    }

    /// Records a file written elsewhere (e.g. by a worker thread).
    pub fn record(&mut self, rel: &str) {
        self.outputs.push(rel.to_owned());
    }

    /// `manifest.toml`: command, versions, seed, output list and the resolved config.
    pub fn write_manifest<C: Serialize>(&mut self, command: &str, seed: Option<u64>, config: &C) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a, C> {
            command: &'a str,
            hystkit_version: &'a str,
            cli_version: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            seed: Option<u64>,
            outputs: &'a [String],
            config: &'a C,
        }
        let m = Manifest {
            command,
            hystkit_version: hystkit::VERSION,
            cli_version: env!("CARGO_PKG_VERSION"),
            seed,
            outputs: &self.outputs,
            config,
        };
        let text = toml::to_string(&m).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let p = self.path(MANIFEST);
        std::fs::write(&p, text).map_err(io(&p))
    }
}

/// One gnuplot panel: curves `ys` against `x`, all columns of `csv`.
pub struct Panel<'a> {
    pub csv: String,
    pub x: &'a str,
    pub ys: Vec<&'a str>,
    pub xlabel: &'a str,
    pub ylabel: &'a str,
    pub logx: bool,
}

/// Gnuplot script drawing each panel from its CSV by column name into `<stem>.png`.
pub fn gnuplot_script(stem: &str, panels: &[Panel]) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set terminal pngcairo size 900,");
    s.push_str(&(320 * panels.len().max(1)).to_string());
    s.push('\n');
    s.push_str(&format!("set output '{stem}.png'\n"));
    s.push_str("set grid\nset key outside right\n");
    s.push_str(&format!("set multiplot layout {},1\n", panels.len().max(1)));
    for p in panels {
        s.push_str(if p.logx {
            "set logscale x\n"
        } else {
            "unset logscale x\n"
        });
        s.push_str(&format!("set xlabel '{}'\nset ylabel '{}'\n", p.xlabel, p.ylabel));
        let curves: Vec<String> =
            p.ys.iter()
                .map(|y| {
                    format!(
                        "'{}' using (column('{}')):(column('{}')) with lines title '{}'",
                        p.csv, p.x, y, y
                    )
                })
                .collect();
        s.push_str("plot ");
        s.push_str(&curves.join(", \\\n     "));
        s.push('\n');
    }
    s.push_str("unset multiplot\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_references_columns_by_name() {
        let s = gnuplot_script(
            "loop",
            &[Panel {
                csv: "hysteresis.csv".into(),
                x: "u",
                ys: vec!["y"],
                xlabel: "A",
                ylabel: "y",
                logx: false,
            }],
        );
        assert!(s.contains("'hysteresis.csv' using (column('u')):(column('y'))"));
        assert!(s.contains("set output 'loop.png'"));
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path()).unwrap();
        run.write_text("a/b.txt", "x").unwrap();
        run.write_manifest(
            "test",
            Some(3),
            &[("k", 1)].into_iter().collect::<std::collections::BTreeMap<_, _>>(),
        )
        .unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let v: toml::Table = text.parse().unwrap();
        assert_eq!(v["seed"].as_integer(), Some(3));
        assert_eq!(v["outputs"].as_array().unwrap()[0].as_str(), Some("a/b.txt"));
        assert_eq!(v["config"]["k"].as_integer(), Some(1));
        assert_eq!(v["hystkit_version"].as_str(), Some(hystkit::VERSION));
    }
}
