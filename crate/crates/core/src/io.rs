//! CSV ingestion, configuration files and serialized results.
//!
//! Site CSVs have the header `cpt_id,easting,northing,depth,qc_mpa`, with
//! `value_log` in place of `qc_mpa` for values that are already logged and
//! `northing` omitted for sites along a line. Depth is positive down in
//! metres; horizontal coordinates are metres from a site origin.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{GeoWarpError, Result};
use crate::infer::{MapFit, McmcFit};
use crate::model::{Domain, Model};
use crate::params::{MeanCoefficients, ParameterVector};
use crate::predict::{PredictionResult, SimulatedFields};
use crate::site::{Coordinate, SiteDataset, Sounding};

/// Measurements shallower than this are dropped on ingestion.
pub const DEFAULT_MIN_DEPTH: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ValueColumn {
    Qc,
    Log,
}

/// Parses a site CSV from any reader. Rows may come in any order.
pub fn read_site_csv<R: Read>(reader: R, min_depth: f64) -> Result<SiteDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| GeoWarpError::Data(format!("CSV header lacks the `{name}` column"));
    let id_col = col("cpt_id").ok_or_else(|| missing("cpt_id"))?;
    let e_col = col("easting").ok_or_else(|| missing("easting"))?;
    let n_col = col("northing");
    let d_col = col("depth").ok_or_else(|| missing("depth"))?;
    let (v_col, kind) = match (col("qc_mpa"), col("value_log")) {
        (Some(c), None) => (c, ValueColumn::Qc),
        (None, Some(c)) => (c, ValueColumn::Log),
        (Some(_), Some(_)) => return Err(GeoWarpError::Data("CSV has both `qc_mpa` and `value_log`".into())),
        (None, None) => return Err(missing("qc_mpa")),
    };

    struct Column {
        location: Vec<f64>,
        line: u64,
        rows: Vec<(f64, f64, u64)>,
    }
    let mut groups: BTreeMap<String, Column> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize, name: &str| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| GeoWarpError::Data(format!("line {line}: invalid {name} `{raw}`")))?;
            if !v.is_finite() {
                return Err(GeoWarpError::Data(format!("line {line}: non-finite {name}")));
            }
            Ok(v)
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(GeoWarpError::Data(format!("line {line}: empty cpt_id")));
        }
        let mut location = vec![field(e_col, "easting")?];
        if let Some(c) = n_col {
            location.push(field(c, "northing")?);
        }
        let depth = field(d_col, "depth")?;
        if depth < 0.0 {
            return Err(GeoWarpError::Data(format!("line {line}: negative depth {depth}")));
        }
        let raw = field(v_col, if kind == ValueColumn::Qc { "qc_mpa" } else { "value_log" })?;
        let value = match kind {
            ValueColumn::Qc if raw <= 0.0 => {
                return Err(GeoWarpError::Data(format!("line {line}: qc_mpa must be positive, got {raw}")))
            }
            ValueColumn::Qc => raw.ln(),
            ValueColumn::Log => raw,
        };
        let entry = groups.entry(id.clone()).or_insert_with(|| Column { location: location.clone(), line, rows: Vec::new() });
        if entry.location != location {
            return Err(GeoWarpError::Data(format!(
                "line {line}: sounding {id} changes location from {:?} (line {})",
                entry.location, entry.line
            )));
        }
        entry.rows.push((depth, value, line));
    }
    let mut soundings = Vec::with_capacity(groups.len());
    for (id, mut g) in groups {
        g.rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = g.rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(GeoWarpError::Data(format!(
                "lines {} and {}: duplicate depth {} in sounding {id}",
                w[0].2.min(w[1].2),
                w[0].2.max(w[1].2),
                w[0].0
            )));
        }
        g.rows.retain(|r| r.0 >= min_depth);
        if g.rows.is_empty() {
            log::warn!("sounding {id} has no measurements below {min_depth} m and is dropped");
            continue;
        }
        let depths = g.rows.iter().map(|r| r.0).collect();
        let values = g.rows.iter().map(|r| r.1).collect();
        soundings.push(Sounding::new(id, g.location, depths, values)?);
    }
    SiteDataset::new(soundings)
}

pub fn load_site_csv(path: impl AsRef<Path>, min_depth: f64) -> Result<SiteDataset> {
    read_site_csv(File::open(path)?, min_depth)
}

/// Writes a site in the `value_log` layout. Values round-trip exactly.
pub fn write_site_csv<W: Write>(ds: &SiteDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if ds.dim() == 2 {
        w.write_record(["cpt_id", "easting", "northing", "depth", "value_log"])?;
    } else {
        w.write_record(["cpt_id", "easting", "depth", "value_log"])?;
    }
    for s in ds.soundings() {
        for (h, v) in s.depths.iter().zip(&s.values) {
            let mut rec = vec![s.id.clone()];
            rec.extend(s.location.iter().map(|x| x.to_string()));
            rec.push(h.to_string());
            rec.push(v.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_site_csv(ds: &SiteDataset, path: impl AsRef<Path>) -> Result<()> {
    write_site_csv(ds, File::create(path)?)
}

/// Deserializes JSON, reporting the path of the offending field.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| GeoWarpError::Json(format!("at `{}`: {}", e.path(), e.inner())))
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| GeoWarpError::Json(e.to_string()))
}

/// Parses and validates a model configuration; absent keys take defaults.
pub fn parse_config_json(text: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig = from_json_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_json(path: impl AsRef<Path>) -> Result<ModelConfig> {
    parse_config_json(&std::fs::read_to_string(path)?)
}

/// SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("configurations always serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Map,
    Mcmc,
}

/// Everything needed to reproduce and reuse a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRecord {
    pub method: FitMethod,
    pub config: ModelConfig,
    pub config_hash: String,
    pub domain: Domain,
    pub seed: u64,
    /// Parents per point of the fitting plan.
    pub m: usize,
    /// Point estimate: the MAP, or the retained MCMC draw of highest
    /// posterior density.
    pub theta: ParameterVector,
    pub chart: Vec<f64>,
    pub omega: MeanCoefficients,
    pub map: Option<MapFit>,
    pub mcmc: Option<McmcFit>,
}

impl FitRecord {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.clone(), self.domain.clone())
    }

    pub fn check_hash(&self) -> Result<()> {
        if config_hash(&self.config) == self.config_hash {
            Ok(())
        } else {
            Err(GeoWarpError::Data("fit file config hash does not match its configuration".into()))
        }
    }
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(to_json_string(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn save_fit_json(fit: &FitRecord, path: impl AsRef<Path>) -> Result<()> {
    save_json(fit, path)
}

pub fn load_fit_json(path: impl AsRef<Path>) -> Result<FitRecord> {
    let fit: FitRecord = from_json_str(&std::fs::read_to_string(path)?)?;
    fit.check_hash()?;
    Ok(fit)
}

fn location_fields(c: &Coordinate) -> [String; 2] {
    [c.s[0].to_string(), c.s.get(1).map(f64::to_string).unwrap_or_default()]
}

/// Summary CSV `easting,northing,depth,mean,sd`.
pub fn write_prediction_csv<W: Write>(p: &PredictionResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["easting", "northing", "depth", "mean", "sd"])?;
    for ((c, m), s) in p.coords.iter().zip(&p.mean).zip(&p.marginal_sd) {
        let [e, n] = location_fields(c);
        w.write_record([e, n, c.h.to_string(), m.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format draws `easting,northing,depth,draw,value`.
pub fn write_fields_csv<W: Write>(f: &SimulatedFields, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["easting", "northing", "depth", "draw", "value"])?;
    for (d, draw) in f.draws.iter().enumerate() {
        for (c, v) in f.coords.iter().zip(draw) {
            let [e, n] = location_fields(c);
            w.write_record([e, n, c.h.to_string(), d.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SAMPLE: &str = "cpt_id,easting,northing,depth,qc_mpa
A,0,0,0.1,2.0
A,0,0,0.3,1.0
A,0,0,0.5,3.0
B,10,5,0.4,4.0
B,10,5,0.3,5.0
";

    #[test]
    fn parses_and_logs() {
        let ds = read_site_csv(SAMPLE.as_bytes(), DEFAULT_MIN_DEPTH).unwrap();
        assert_eq!(ds.soundings().len(), 2);
        let a = &ds.soundings()[0];
        assert_eq!(a.depths, vec![0.3, 0.5]);
        assert_eq!(a.values[0], 0.0);
        assert_eq!(ds.soundings()[1].depths, vec![0.3, 0.4]);
        let all = read_site_csv(SAMPLE.as_bytes(), 0.0).unwrap();
        assert_eq!(all.n_points(), 5);
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let bad = "cpt_id,easting,northing,depth,qc_mpa\nA,0,0,0.5,1.0\nA,0,0,0.6,-0.5\n";
        let e = read_site_csv(bad.as_bytes(), 0.25).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let bad = "cpt_id,easting,northing,depth,qc_mpa\nA,0,0,0.5,1.0\nA,0,0,x,2\n";
        assert!(read_site_csv(bad.as_bytes(), 0.25).unwrap_err().to_string().contains("line 3"));
        let dup = "cpt_id,easting,northing,depth,qc_mpa\nA,0,0,0.5,1.0\nA,0,0,0.5,2\n";
        let e = read_site_csv(dup.as_bytes(), 0.25).unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");
        let moved = "cpt_id,easting,northing,depth,qc_mpa\nA,0,0,0.5,1.0\nA,1,0,0.6,2\n";
        assert!(read_site_csv(moved.as_bytes(), 0.25).is_err());
    }

    #[test]
    fn shuffled_rows_give_identical_site() {
        let mut lines: Vec<&str> = SAMPLE.lines().skip(1).collect();
        let reference = read_site_csv(SAMPLE.as_bytes(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            lines.shuffle(&mut rng);
            let text = format!("cpt_id,easting,northing,depth,qc_mpa\n{}\n", lines.join("\n"));
            assert_eq!(read_site_csv(text.as_bytes(), 0.0).unwrap(), reference);
        }
    }

    #[test]
    fn site_round_trip() {
        let site = crate::synth::cv_site(2).unwrap().dataset;
        let mut buf = Vec::new();
        write_site_csv(&site, &mut buf).unwrap();
        let back = read_site_csv(buf.as_slice(), 0.0).unwrap();
        for (a, b) in site.soundings().iter().zip(back.soundings()) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let one = "cpt_id,easting,depth,value_log\nA,3,0.5,1.25\n";
        let ds = read_site_csv(one.as_bytes(), 0.25).unwrap();
        assert_eq!(ds.dim(), 1);
        let mut buf = Vec::new();
        write_site_csv(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), one);
    }

    #[test]
    fn config_defaults_and_errors() {
        assert_eq!(parse_config_json("{}").unwrap(), ModelConfig::default());
        let e = parse_config_json(r#"{"hyper": {"rho_r": 6, "bogus": 1}}"#).unwrap_err().to_string();
        assert!(e.contains("hyper"), "{e}");
        let e = parse_config_json(r#"{"nu": "x"}"#).unwrap_err().to_string();
        assert!(e.contains("nu"), "{e}");
        assert!(parse_config_json(r#"{"delta_mu": -1}"#).is_err());
        let mut other = ModelConfig::default();
        other.nu = 2.5;
        assert_ne!(config_hash(&other), config_hash(&ModelConfig::default()));
    }

    #[test]
    fn fit_round_trip() {
        let model = crate::synth::cv_model().unwrap();
        let (theta, omega) = crate::synth::TruthSpec::cross_validation().truth(&model).unwrap();
        let cfg = model.cfg().clone();
        let rec = FitRecord {
            method: FitMethod::Map,
            config_hash: config_hash(&cfg),
            config: cfg,
            domain: model.domain().clone(),
            seed: 4,
            m: 50,
            chart: model.encode(&theta).unwrap(),
            theta,
            omega,
            map: None,
            mcmc: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        save_fit_json(&rec, &path).unwrap();
        let back = load_fit_json(&path).unwrap();
        assert_eq!(back, rec);
        let mut tampered = rec.clone();
        tampered.config.nu = 0.5;
        save_fit_json(&tampered, &path).unwrap();
        assert!(load_fit_json(&path).is_err());
    }
}
