use super::{ObjectiveTerm, ObjectiveWeights, Plan, Provenance};
use crate::dosecalc::{Beam, DoseDistribution};
use crate::lp::Certificate;
use crate::volume::{read_array, read_u32, read_volume, write_volume, FormatError, Volume, VolumeData};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const PLAN_MAGIC: &[u8; 4] = b"KBPP";
const PLAN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    provenance: Provenance,
    beams: Vec<Beam>,
    terms: Vec<ObjectiveTerm>,
    term_values: Vec<f64>,
    weights: Option<ObjectiveWeights>,
    objective: Option<f64>,
    complexity: f64,
    complexity_bound: Option<f64>,
    certificate: Option<Certificate>,
    mimic_residual: Option<f64>,
    spacing: [f64; 3],
}

/// Layout (little-endian): magic `KBPP`, u32 version, u32 header length, JSON
/// header, a `KBPV` dose volume, then u32 beamlet count and f32 fluences.
///
/// Dose and fluence are stored at single precision; the header keeps the
/// double-precision term values and complexity computed when the plan was
/// made.
pub fn write_plan<W: Write>(mut w: W, plan: &Plan) -> Result<(), FormatError> {
    let header = Header {
        provenance: plan.provenance,
        beams: plan.beams.clone(),
        terms: plan.terms.clone(),
        term_values: plan.term_values.clone(),
        weights: plan.weights.clone(),
        objective: plan.objective,
        complexity: plan.complexity,
        complexity_bound: plan.complexity_bound,
        certificate: plan.certificate,
        mimic_residual: plan.mimic_residual,
        spacing: plan.dose.spacing,
    };
    let json = serde_json::to_vec(&header).map_err(|e| FormatError::Malformed(e.to_string()))?;
    w.write_all(PLAN_MAGIC)?;
    w.write_all(&PLAN_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let vol = Volume {
        dims: plan.dose.dims,
        spacing: plan.dose.spacing.map(|s| s as f32),
        data: VolumeData::Dose(plan.dose.values.iter().map(|&v| v as f32).collect()),
    };
    write_volume(&mut w, &vol)?;
    w.write_all(&(plan.fluence.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(plan.fluence.len() * 4);
    for &x in &plan.fluence {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_plan<R: Read>(mut r: R) -> Result<Plan, FormatError> {
    let magic = read_array::<4, _>(&mut r)?;
    if &magic != PLAN_MAGIC {
        return Err(FormatError::BadMagic { expected: *PLAN_MAGIC, found: magic });
    }
    let version = read_u32(&mut r)?;
    if version != PLAN_VERSION {
        return Err(FormatError::Version(version));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let vol = read_volume(&mut r)?;
    let VolumeData::Dose(values) = vol.data else {
        return Err(FormatError::Malformed("plan volume is not a dose payload".into()));
    };
    let n = read_u32(&mut r)? as usize;
    let expected: usize = h.beams.iter().map(Beam::beamlet_count).sum();
    if n != expected {
        return Err(FormatError::Malformed(format!("{n} fluences for {expected} beamlets")));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let fluence = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Plan {
        fluence,
        dose: DoseDistribution { dims: vol.dims, spacing: h.spacing, values: values.into_iter().map(f64::from).collect() },
        beams: h.beams,
        terms: h.terms,
        term_values: h.term_values,
        weights: h.weights,
        objective: h.objective,
        complexity: h.complexity,
        complexity_bound: h.complexity_bound,
        certificate: h.certificate,
        mimic_residual: h.mimic_residual,
        provenance: h.provenance,
    })
}
