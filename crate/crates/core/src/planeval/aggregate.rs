use super::criteria::{ClinicalCriterion, Comparator, CriteriaReport};
use super::gamma::GammaResult;
use super::PlanEvalError;
use crate::phantom::Phantom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureGroup {
    Oar,
    Ptv,
    All,
}

impl StructureGroup {
    pub const ROWS: [StructureGroup; 3] = [StructureGroup::Oar, StructureGroup::Ptv, StructureGroup::All];

    pub fn label(self) -> &'static str {
        match self {
            StructureGroup::Oar => "All OARs",
            StructureGroup::Ptv => "All PTVs",
            StructureGroup::All => "All Structures",
        }
    }

    fn contains(self, c: &ClinicalCriterion) -> bool {
        match self {
            StructureGroup::Oar => !c.is_target(),
            StructureGroup::Ptv => c.is_target(),
            StructureGroup::All => true,
        }
    }
}

/// Percentages of evaluable criteria satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionRates {
    pub oar: f64,
    pub ptv: f64,
    pub all: f64,
    pub oar_evaluated: usize,
    pub ptv_evaluated: usize,
}

impl SatisfactionRates {
    pub fn get(&self, g: StructureGroup) -> f64 {
        match g {
            StructureGroup::Oar => self.oar,
            StructureGroup::Ptv => self.ptv,
            StructureGroup::All => self.all,
        }
    }
}

pub fn aggregate_criteria(reports: &[CriteriaReport]) -> Result<SatisfactionRates, PlanEvalError> {
    if reports.is_empty() {
        return Err(PlanEvalError::EmptyPopulation);
    }
    let count = |g: StructureGroup| {
        let (mut n, mut p) = (0usize, 0usize);
        for o in reports.iter().flat_map(|r| &r.outcomes).filter(|o| g.contains(&o.criterion)) {
            if let Some(ok) = o.passed() {
                n += 1;
                p += ok as usize;
            }
        }
        (n, p)
    };
    let pct = |(n, p): (usize, usize)| if n == 0 { f64::NAN } else { 100.0 * p as f64 / n as f64 };
    let (oar, ptv, all) = (count(StructureGroup::Oar), count(StructureGroup::Ptv), count(StructureGroup::All));
    Ok(SatisfactionRates { oar: pct(oar), ptv: pct(ptv), all: pct(all), oar_evaluated: oar.0, ptv_evaluated: ptv.0 })
}

/// One row per planning method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionTable {
    pub rows: Vec<(String, SatisfactionRates)>,
}

impl SatisfactionTable {
    pub fn push(&mut self, method: &str, reports: &[CriteriaReport]) -> Result<(), PlanEvalError> {
        self.rows.push((method.to_string(), aggregate_criteria(reports)?));
        Ok(())
    }

    pub fn get(&self, method: &str) -> Option<&SatisfactionRates> {
        self.rows.iter().find(|(m, _)| m == method).map(|(_, r)| r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,oar_pct,ptv_pct,all_pct\n");
        for (m, r) in &self.rows {
            s.push_str(&format!("{m},{:.6},{:.6},{:.6}\n", r.oar, r.ptv, r.all));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadToHeadRow {
    pub criterion: ClinicalCriterion,
    /// Gy; positive when the KBP plan is better. `None` if either plan could
    /// not be evaluated.
    pub difference: Option<f64>,
}

pub fn head_to_head(kbp: &CriteriaReport, clinical: &CriteriaReport) -> Result<Vec<HeadToHeadRow>, PlanEvalError> {
    if kbp.outcomes.len() != clinical.outcomes.len() {
        return Err(PlanEvalError::Mismatch(format!(
            "{} vs {} criteria",
            kbp.outcomes.len(),
            clinical.outcomes.len()
        )));
    }
    kbp.outcomes
        .iter()
        .zip(&clinical.outcomes)
        .map(|(k, c)| {
            if k.criterion != c.criterion {
                return Err(PlanEvalError::Mismatch(format!("{} vs {}", k.criterion, c.criterion)));
            }
            let difference = match (k.achieved, c.achieved) {
                (Some(kv), Some(cv)) => Some(match k.criterion.comparator {
                    Comparator::AtMost => cv - kv,
                    Comparator::AtLeast => kv - cv,
                }),
                _ => None,
            };
            Ok(HeadToHeadRow { criterion: k.criterion, difference })
        })
        .collect()
}

/// Passing rates of one plan over the OAR, PTV and all-structure voxels.
pub fn gamma_group_rates(result: &GammaResult, phantom: &Phantom) -> Result<[f64; 3], PlanEvalError> {
    if result.values.len() != phantom.grid.len() {
        return Err(PlanEvalError::Mismatch(format!(
            "gamma over {} voxels, phantom has {}",
            result.values.len(),
            phantom.grid.len()
        )));
    }
    let mut groups: [Vec<usize>; 3] = Default::default();
    for (v, l) in phantom.grid.labels.iter().enumerate() {
        if l.is_target() {
            groups[1].push(v);
        } else if l.is_oar() {
            groups[0].push(v);
        } else {
            continue;
        }
        groups[2].push(v);
    }
    Ok(groups.map(|g| result.rate_over(&g)))
}

/// Mean gamma passing rate per structure group (rows) and method (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaTable {
    pub methods: Vec<String>,
    /// `rates[g][m]` for group `StructureGroup::ROWS[g]`.
    pub rates: [Vec<f64>; 3],
}

impl GammaTable {
    pub fn get(&self, group: StructureGroup, method: &str) -> Option<f64> {
        let m = self.methods.iter().position(|x| x == method)?;
        let g = StructureGroup::ROWS.iter().position(|x| *x == group)?;
        Some(self.rates[g][m])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group");
        for m in &self.methods {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for (g, row) in StructureGroup::ROWS.iter().zip(&self.rates) {
            s.push_str(g.label());
            for r in row {
                s.push_str(&format!(",{r:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// `per_method[m] = (name, per-patient group rates)`.
pub fn gamma_table(per_method: &[(String, Vec<[f64; 3]>)]) -> Result<GammaTable, PlanEvalError> {
    if per_method.is_empty() || per_method.iter().any(|(_, p)| p.is_empty()) {
        return Err(PlanEvalError::EmptyPopulation);
    }
    let mut rates: [Vec<f64>; 3] = Default::default();
    for (_, patients) in per_method {
        for (g, row) in rates.iter_mut().enumerate() {
            row.push(patients.iter().map(|p| p[g]).sum::<f64>() / patients.len() as f64);
        }
    }
    Ok(GammaTable { methods: per_method.iter().map(|(m, _)| m.clone()).collect(), rates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planeval::{CriterionOutcome, CLINICAL_CRITERIA};

    fn report(values: [f64; 10]) -> CriteriaReport {
        CriteriaReport {
            outcomes: CLINICAL_CRITERIA
                .iter()
                .zip(values)
                .map(|(c, v)| CriterionOutcome { criterion: *c, achieved: Some(v) })
                .collect(),
        }
    }

    const PASSING: [f64; 10] = [50.0, 40.0, 20.0, 20.0, 40.0, 40.0, 70.0, 54.0, 61.0, 67.0];

    #[test]
    fn all_pass_population() {
        let r = aggregate_criteria(&[report(PASSING), report(PASSING)]).unwrap();
        assert_eq!((r.oar, r.ptv, r.all), (100.0, 100.0, 100.0));
        assert_eq!(aggregate_criteria(&[]), Err(PlanEvalError::EmptyPopulation));
    }

    #[test]
    fn one_failed_oar_criterion() {
        let n = 4;
        let mut pop = vec![report(PASSING); n];
        pop[2].outcomes[4].achieved = Some(46.0);
        let r = aggregate_criteria(&pop).unwrap();
        let want = 100.0 * (7 * n - 1) as f64 / (7 * n) as f64;
        assert!((r.oar - want).abs() < 1e-12);
        assert_eq!(r.ptv, 100.0);
        assert!((r.all - 100.0 * 39.0 / 40.0).abs() < 1e-12);
    }

    #[test]
    fn not_evaluable_criteria_are_excluded() {
        let mut pop = vec![report(PASSING)];
        pop[0].outcomes[0].achieved = None;
        pop[0].outcomes[1].achieved = Some(60.0);
        let r = aggregate_criteria(&pop).unwrap();
        assert_eq!(r.oar_evaluated, 6);
        assert!((r.oar - 500.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn head_to_head_signs() {
        let mut kbp = PASSING;
        let mut clinical = PASSING;
        assert!(head_to_head(&report(kbp), &report(clinical)).unwrap().iter().all(|r| r.difference == Some(0.0)));
        kbp[0] = 50.0;
        clinical[0] = 54.0;
        kbp[9] = 67.0;
        clinical[9] = 66.5;
        let rows = head_to_head(&report(kbp), &report(clinical)).unwrap();
        assert_eq!(rows[0].difference, Some(4.0));
        assert_eq!(rows[9].difference, Some(0.5));
        let mut short = report(kbp);
        short.outcomes.pop();
        assert!(head_to_head(&short, &report(clinical)).is_err());
    }

    #[test]
    fn gamma_table_averages_patients() {
        let t = gamma_table(&[
            ("GAN".into(), vec![[1.0, 0.5, 0.75], [0.5, 1.0, 0.75]]),
            ("CNN".into(), vec![[0.25, 0.25, 0.25]]),
        ])
        .unwrap();
        assert_eq!(t.get(StructureGroup::Oar, "GAN"), Some(0.75));
        assert_eq!(t.get(StructureGroup::All, "CNN"), Some(0.25));
        assert_eq!(t.get(StructureGroup::All, "RF"), None);
        assert!(t.to_csv().starts_with("group,GAN,CNN\nAll OARs,0.750000,0.250000\n"));
        assert!(gamma_table(&[]).is_err());
    }
}
