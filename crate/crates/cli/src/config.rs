//! Flat `key=value` config files and option resolution.
//!
//! Precedence is command-line flag, then config file, then built-in default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use panelqr::panelio::{IndexSource, PanelSchema};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected key=value, got `{line}`", n + 1);
            };
            // `rmax` and `--rmax` and `r_max` all name the same key
            let key = k.trim().trim_start_matches("--").replace('_', "-");
            values.insert(key, v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key `{key}`: {e}")),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            None => Ok(false),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => bail!("config key `{key}`: `{v}` is not a boolean"),
        }
    }
}

/// Flag value, else config value, else `default`.
pub fn pick<T: FromStr>(flag: Option<T>, cfg: &ConfigFile, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(cfg.get(key)?.unwrap_or(default)),
    }
}

pub fn pick_opt<T: FromStr>(flag: Option<T>, cfg: &ConfigFile, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.get(key),
    }
}

/// Bandwidth flag: `cv` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthArg {
    Cv,
    Fixed(f64),
}

impl FromStr for BandwidthArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("cv") {
            return Ok(BandwidthArg::Cv);
        }
        match s.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(BandwidthArg::Fixed(h)),
            _ => Err(format!("bandwidth `{s}` is neither `cv` nor a positive number")),
        }
    }
}

impl std::fmt::Display for BandwidthArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BandwidthArg::Cv => write!(f, "cv"),
            BandwidthArg::Fixed(h) => write!(f, "{h}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexArg {
    Z,
    Time,
}

impl FromStr for IndexArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "z" => Ok(IndexArg::Z),
            "time" => Ok(IndexArg::Time),
            _ => Err(format!("index `{s}` is not `z` or `time`")),
        }
    }
}

impl std::fmt::Display for IndexArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IndexArg::Z => "z",
            IndexArg::Time => "time",
        })
    }
}

/// Comma-separated list of numbers.
pub fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect()
}

/// `y=col,x=a;b,z=col,id=col,t=col`; `x` may also be repeated.
pub fn parse_schema(s: &str, index: IndexArg) -> std::result::Result<PanelSchema, String> {
    let mut schema = PanelSchema::canonical(1);
    schema.x.clear();
    let mut saw_z = false;
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("schema entry `{part}` is not key=column"))?;
        let v = v.trim().to_string();
        match k.trim() {
            "y" => schema.y = v,
            "x" => schema.x.extend(v.split(';').map(|c| c.trim().to_string()).filter(|c| !c.is_empty())),
            "z" => {
                schema.z = Some(v);
                saw_z = true;
            }
            "id" => schema.id = v,
            "t" | "time" => schema.time = v,
            other => return Err(format!("unknown schema key `{other}`")),
        }
    }
    if schema.x.is_empty() {
        return Err("schema needs at least one x column".into());
    }
    match index {
        IndexArg::Time => {
            schema.index_source = IndexSource::ScaledTime;
            schema.z = None;
        }
        IndexArg::Z if !saw_z => schema.z = Some("z".into()),
        IndexArg::Z => {}
    }
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys_are_normalized() {
        let c = ConfigFile::parse("# comment\nr_max = 4\n--tau=0.25\n\nkernel=epa").unwrap();
        assert_eq!(c.get::<usize>("r-max").unwrap(), Some(4));
        assert_eq!(c.raw("tau"), Some("0.25"));
        assert_eq!(pick(Some(7usize), &c, "r-max", 5).unwrap(), 7);
        assert_eq!(pick(None, &c, "r-max", 5usize).unwrap(), 4);
        assert_eq!(pick(None, &c, "seed", 9u64).unwrap(), 9);
        assert!(ConfigFile::parse("novalue").is_err());
    }

    #[test]
    fn schema_parsing() {
        let s = parse_schema("y=ret,x=a;b,x=c,z=vix,id=firm,t=month", IndexArg::Z).unwrap();
        assert_eq!(s.x, vec!["a", "b", "c"]);
        assert_eq!(s.z.as_deref(), Some("vix"));
        assert_eq!(s.time, "month");
        let s = parse_schema("y=ret,x=a,id=firm,t=month", IndexArg::Time).unwrap();
        assert_eq!(s.index_source, IndexSource::ScaledTime);
        assert!(parse_schema("y=ret", IndexArg::Z).is_err());
        assert!(parse_schema("y=ret,x=a,w=q", IndexArg::Z).is_err());
    }

    #[test]
    fn bandwidth_argument() {
        assert_eq!("cv".parse::<BandwidthArg>().unwrap(), BandwidthArg::Cv);
        assert_eq!("0.2".parse::<BandwidthArg>().unwrap(), BandwidthArg::Fixed(0.2));
        assert!("-1".parse::<BandwidthArg>().is_err());
    }
}
