use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// One command invocation's output directory, `<out>/<timestamp>-<command>`,
/// plus a log of everything the command printed.
pub struct Run {
    pub dir: PathBuf,
    log: String,
}

impl Run {
    pub fn create(out: &Path, command: &str, snapshot: &str) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = out.join(format!("{stamp}-{command}"));
        let mut dir = base.clone();
        let mut k = 1;
        while dir.exists() {
            k += 1;
            dir = PathBuf::from(format!("{}-{k}", base.display()));
        }
        std::fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        std::fs::write(dir.join("config.txt"), snapshot)?;
        Ok(Self {
            dir,
            log: String::new(),
        })
    }

    pub fn say(&mut self, line: impl Display) {
        let line = line.to_string();
        // A closed pipe (`| head`) is not the command's failure.
        let _ = writeln!(std::io::stdout(), "{line}");
        self.log.push_str(&line);
        self.log.push('\n');
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Keeps what was logged so far, plus the error, without the `run:` line.
    pub fn fail(self, err: &anyhow::Error) {
        let log = format!("{}error: {err:#}\n", self.log);
        let _ = std::fs::write(self.dir.join("log.txt"), log);
    }

    pub fn finish(mut self) -> Result<()> {
        let line = format!("run: {}", self.dir.display());
        self.say(line);
        std::fs::write(self.dir.join("log.txt"), &self.log)?;
        Ok(())
    }
}
