//! Desk-scale stand-in for Edge-IIoTset.
//!
//! Each class owns a signature: fixed categorical values on a random half of
//! the fields. The remaining fields carry a shared background value. A row
//! starts from its class signature and then, independently per field, is
//! replaced by a uniform draw from the field's domain with probability
//! `noise`.

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Class names of the eight-class federated experiments, largest first.
pub const EDGE_IIOT_CLASSES: [&str; 8] = [
    "Normal",
    "DDoS_UDP",
    "DDoS_ICMP",
    "SQL_injection",
    "Password",
    "Vulnerability_scanner",
    "DDoS_TCP",
    "DDoS_HTTP",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub fields: usize,
    pub rows_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_domain")]
    pub values_per_field: usize,
}

fn default_domain() -> usize {
    16
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            fields: 12,
            rows_per_class: 500,
            noise: 0.1,
            seed: 7,
            values_per_field: default_domain(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub header: Vec<String>,
    pub class_names: Vec<String>,
    /// `signatures[c][f]` is the value index class `c` puts in field `f`;
    /// `None` marks a background field.
    pub signatures: Vec<Vec<Option<usize>>>,
    /// `(field value indices, class id)` in file order.
    pub rows: Vec<(Vec<usize>, usize)>,
}

pub const LABEL_COLUMN: &str = "Attack_type";
const BACKGROUND: usize = 0;

fn class_name(c: usize) -> String {
    EDGE_IIOT_CLASSES
        .get(c)
        .map_or_else(|| format!("Attack_{c}"), |s| s.to_string())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.classes < 2 || spec.fields < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and 2 fields, got {} and {}",
            spec.classes, spec.fields
        )));
    }
    if spec.values_per_field < 2 || !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::InvalidArgument(format!(
            "bad domain size {} or noise {}",
            spec.values_per_field, spec.noise
        )));
    }
    let mut rng = rng_for(spec.seed, &[stream::SYNTH]);
    let subset = spec.fields.div_ceil(2);
    let mut signatures: Vec<Vec<Option<usize>>> = Vec::with_capacity(spec.classes);
    while signatures.len() < spec.classes {
        let mut sig = vec![None; spec.fields];
        for f in index::sample(&mut rng, spec.fields, subset) {
            sig[f] = Some(rng.random_range(0..spec.values_per_field));
        }
        let resolved = |s: &[Option<usize>]| -> Vec<usize> {
            s.iter().map(|v| v.unwrap_or(BACKGROUND)).collect()
        };
        if signatures.iter().all(|s| resolved(s) != resolved(&sig)) {
            signatures.push(sig);
        }
    }

    let mut rows = Vec::with_capacity(spec.classes * spec.rows_per_class);
    for (c, sig) in signatures.iter().enumerate() {
        for _ in 0..spec.rows_per_class {
            let values = sig
                .iter()
                .map(|v| {
                    if rng.random::<f64>() < spec.noise {
                        rng.random_range(0..spec.values_per_field)
                    } else {
                        v.unwrap_or(BACKGROUND)
                    }
                })
                .collect();
            rows.push((values, c));
        }
    }
    rows.shuffle(&mut rng);

    let mut header: Vec<String> = (0..spec.fields).map(|f| format!("f{f}")).collect();
    header.push(LABEL_COLUMN.into());
    Ok(SyntheticData {
        header,
        class_names: (0..spec.classes).map(class_name).collect(),
        signatures,
        rows,
    })
}

impl SyntheticData {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&self.header).expect("in-memory write");
        for (values, c) in &self.rows {
            let mut rec: Vec<String> = values.iter().map(|v| format!("v{v}")).collect();
            rec.push(self.class_names[*c].clone());
            w.write_record(&rec).expect("in-memory write");
        }
        drop(w);
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
