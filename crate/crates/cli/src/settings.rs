//! Flat `key = value` settings files and shared value parsers.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use kibam_core::battery_model::BatteryParams;
use kibam_core::load_profiles::StochasticLoadModel;

/// Bad invocation or unreadable input; maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: HashMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
            values.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                Self::parse(&text).with_context(|| format!("reading {}", p.display()))
            }
        }
    }

    /// The flag if given, else the file's value for `key`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| usage(format!("config key {key} = {v}: {e}"))),
        }
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Boolean switches: a set flag wins, otherwise `key = true|false` from the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.pick_or(None, key, false)
    }
}

/// `<n>x<B1|B2|custom:C,c,kprime>`.
pub fn parse_batteries(spec: &str) -> Result<Vec<BatteryParams>> {
    let bad = || usage(format!("battery spec '{spec}': expected <n>x<B1|B2|custom:C,c,kprime>"));
    let (n, kind) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    let kind = kind.trim();
    let params = if kind.eq_ignore_ascii_case("b1") {
        BatteryParams::b1()
    } else if kind.eq_ignore_ascii_case("b2") {
        BatteryParams::b2()
    } else if let Some(rest) = kind.strip_prefix("custom:") {
        let v: Vec<f64> = rest.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        if v.len() != 3 {
            return Err(bad());
        }
        BatteryParams::new(v[0], v[1], v[2]).map_err(|e| usage(format!("battery spec '{spec}': {e}")))?
    } else {
        return Err(bad());
    };
    Ok(vec![params; n])
}

/// `default` or one of the amplitude families `R100`, `R250`, ….
pub fn parse_model(name: &str) -> Result<StochasticLoadModel> {
    if name.eq_ignore_ascii_case("default") {
        return Ok(StochasticLoadModel::default());
    }
    StochasticLoadModel::named(name).map_err(|e| usage(e.to_string()))
}
