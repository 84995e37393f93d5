//! Patients, modality availability, outcome labels and cross-validation folds.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, permutation};
use crate::tensor::Tensor;

/// Horizon of the binary 3-year tasks, in months.
pub const THREE_YEARS: f64 = 36.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Rna,
    Text,
}

impl Modality {
    /// Fixed order used for concatenation everywhere.
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Rna, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> char {
        match self {
            Modality::Image => 'I',
            Modality::Rna => 'R',
            Modality::Text => 'T',
        }
    }

    /// Lowercase name, also the per-modality directory name on disk.
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Rna => "rna",
            Modality::Text => "text",
        }
    }
}

/// Which modalities a patient has, in `I, R, T` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Availability(pub [bool; 3]);

impl Availability {
    pub const FULL: Availability = Availability([true; 3]);

    pub fn only(m: Modality) -> Self {
        let mut a = [false; 3];
        a[m.index()] = true;
        Self(a)
    }

    pub fn without(self, m: Modality) -> Self {
        let mut a = self.0;
        a[m.index()] = false;
        Self(a)
    }

    pub fn has(self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(self) -> bool {
        self.count() == 0
    }

    pub fn intersect(self, other: Self) -> Self {
        Self([self.0[0] && other.0[0], self.0[1] && other.0[1], self.0[2] && other.0[2]])
    }

    pub fn is_subset_of(self, other: Self) -> bool {
        self.intersect(other) == self
    }

    pub fn observed(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.has(m))
    }

    /// The seven non-empty subsets, ordered by bitmask.
    pub fn nonempty_subsets() -> [Availability; 7] {
        core::array::from_fn(|i| {
            let b = i + 1;
            Availability([b & 1 != 0, b & 2 != 0, b & 4 != 0])
        })
    }

    /// Position of this subset in [`Availability::nonempty_subsets`].
    pub fn subset_index(self) -> Option<usize> {
        let b = self.0[0] as usize | (self.0[1] as usize) << 1 | (self.0[2] as usize) << 2;
        b.checked_sub(1)
    }
}

impl fmt::Display for Availability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in Modality::ALL {
            write!(f, "{}", if self.has(m) { m.code() } else { '-' })?;
        }
        Ok(())
    }
}

/// One modality's precomputed embedding matrix `[L, D_m]`.
///
/// Rows that are entirely zero are padding and are masked out of attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub matrix: Tensor,
    pub valid: Vec<bool>,
}

impl Embedding {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.ndim() != 2 {
            return Err(Error::DimMismatch(alloc::format!("embedding must be 2-D, got {:?}", matrix.shape())));
        }
        let valid = (0..matrix.rows()).map(|i| matrix.row(i).iter().any(|&v| v != 0.0)).collect();
        Ok(Self { matrix, valid })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub time_months: f64,
    pub censored: bool,
}

impl Outcome {
    /// Positive when the event happened by `horizon`, negative when the
    /// patient was followed past it, absent when censored before it.
    pub fn label_by(self, horizon: f64) -> Option<bool> {
        if !self.censored && self.time_months <= horizon {
            Some(true)
        } else if self.time_months >= horizon {
            Some(false)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub embeddings: [Option<Embedding>; 3],
    pub survival: Outcome,
    /// Progression-free interval, when annotated.
    pub pfi: Option<Outcome>,
    pub site: u32,
}

impl PatientRecord {
    pub fn availability(&self) -> Availability {
        Availability(core::array::from_fn(|i| self.embeddings[i].is_some()))
    }

    pub fn embedding(&self, m: Modality) -> Option<&Embedding> {
        self.embeddings[m.index()].as_ref()
    }

    pub fn label_3y_mortality(&self) -> Option<bool> {
        self.survival.label_by(THREE_YEARS)
    }

    pub fn label_3y_recurrence(&self) -> Option<bool> {
        self.pfi.and_then(|p| p.label_by(THREE_YEARS))
    }

    /// Copy restricted to `keep`, which may only remove modalities.
    pub fn restricted(&self, keep: Availability) -> Result<Self> {
        let have = self.availability();
        let eff = have.intersect(keep);
        if eff.is_empty() {
            return Err(Error::NoObservedModality);
        }
        let mut out = self.clone();
        for m in Modality::ALL {
            if !eff.has(m) {
                out.embeddings[m.index()] = None;
            }
        }
        Ok(out)
    }
}

/// Sequence length and feature width of one modality's embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub len: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub dims: [ModalityDims; 3],
}

impl Cohort {
    /// Sorts by patient id and checks the record invariants.
    pub fn new(mut patients: Vec<PatientRecord>, dims: [ModalityDims; 3]) -> Result<Self> {
        patients.sort_by(|a, b| a.id.cmp(&b.id));
        for w in patients.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::InvalidConfig(alloc::format!("duplicate patient id {}", w[0].id)));
            }
        }
        for p in &patients {
            if p.availability().is_empty() {
                return Err(Error::NoObservedModality);
            }
            if !(p.survival.time_months >= 0.0) {
                return Err(Error::InvalidConfig(alloc::format!("patient {} has negative time", p.id)));
            }
            for m in Modality::ALL {
                if let Some(e) = p.embedding(m) {
                    if e.dim() != dims[m.index()].dim {
                        return Err(Error::DimMismatch(alloc::format!(
                            "patient {} {}: width {} but cohort expects {}",
                            p.id,
                            m.name(),
                            e.dim(),
                            dims[m.index()].dim
                        )));
                    }
                    if e.num_valid() == 0 {
                        return Err(Error::AllKeysMasked { group: 0 });
                    }
                }
            }
        }
        Ok(Self { patients, dims })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Indices of patients with all three modalities.
    pub fn trimodal_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.patients[i].availability() == Availability::FULL).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort { patients: idx.iter().map(|&i| self.patients[i].clone()).collect(), dims: self.dims }
    }

    pub fn stats(&self) -> CohortStats {
        cohort_stats(&self.patients)
    }
}

/// Counts in the layout of a per-cohort statistics table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n: usize,
    pub n_trimodal: usize,
    pub os_events: usize,
    pub os_censored: usize,
    pub mortality_pos: usize,
    pub mortality_neg: usize,
    pub recurrence_pos: usize,
    pub recurrence_neg: usize,
}

pub fn cohort_stats(patients: &[PatientRecord]) -> CohortStats {
    let mut s = CohortStats { n: patients.len(), ..Default::default() };
    for p in patients {
        if p.availability() == Availability::FULL {
            s.n_trimodal += 1;
        }
        if p.survival.censored {
            s.os_censored += 1;
        } else {
            s.os_events += 1;
        }
        match p.label_3y_mortality() {
            Some(true) => s.mortality_pos += 1,
            Some(false) => s.mortality_neg += 1,
            None => {}
        }
        match p.label_3y_recurrence() {
            Some(true) => s.recurrence_pos += 1,
            Some(false) => s.recurrence_neg += 1,
            None => {}
        }
    }
    s
}

/// Parses an `a / b` count pair.
pub fn parse_count_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('/')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` folds over `n` patients: test sets partition the cohort; of the rest,
/// a tenth of the cohort goes to validation and the remainder to training.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidConfig(alloc::format!("need at least 2 folds, got {}", k)));
    }
    if n < k {
        return Err(Error::InvalidConfig(alloc::format!("{} patients cannot fill {} folds", n, k)));
    }
    let order = permutation(&mut derived_rng(seed, &[0xf01d]), n);
    let n_val = (n as f64 * 0.1 + 0.5) as usize;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let (lo, hi) = (f * n / k, (f + 1) * n / k);
        let mut test: Vec<usize> = order[lo..hi].to_vec();
        let rest: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let shuffled = permutation(&mut derived_rng(seed, &[0xf01d, f as u64 + 1]), rest.len());
        let mut val: Vec<usize> = shuffled[..n_val.min(rest.len())].iter().map(|&i| rest[i]).collect();
        let mut train: Vec<usize> = shuffled[n_val.min(rest.len())..].iter().map(|&i| rest[i]).collect();
        test.sort_unstable();
        val.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, val, test });
    }
    Ok(folds)
}

/// 80/20 train/validation split made separately inside each site.
pub fn stratified_split(sites: &[u32], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut strata: Vec<u32> = sites.to_vec();
    strata.sort_unstable();
    strata.dedup();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in strata {
        let members: Vec<usize> = (0..sites.len()).filter(|&i| sites[i] == s).collect();
        let perm = permutation(&mut derived_rng(seed, &[0x5117, s as u64]), members.len());
        let n_val = (members.len() as f64 * val_fraction + 0.5) as usize;
        for (j, &p) in perm.iter().enumerate() {
            if j < n_val {
                val.push(members[p]);
            } else {
                train.push(members[p]);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Availability masks of a list of patients.
pub fn availabilities(patients: &[PatientRecord]) -> Vec<Availability> {
    patients.iter().map(PatientRecord::availability).collect()
}


#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::string::ToString;

    fn patient(id: &str, avail: [bool; 3], time: f64, censored: bool, pfi: Option<(f64, bool)>) -> PatientRecord {
        let emb = |on: bool| on.then(|| Embedding::new(Tensor::filled(&[1, 2], 1.0)).unwrap());
        PatientRecord {
            id: id.to_string(),
            embeddings: [emb(avail[0]), emb(avail[1]), emb(avail[2])],
            survival: Outcome { time_months: time, censored },
            pfi: pfi.map(|(t, c)| Outcome { time_months: t, censored: c }),
            site: 0,
        }
    }

    #[test]
    fn three_year_labels_follow_exclusion_rule() {
        assert_eq!(patient("a", [true; 3], 12.0, false, None).label_3y_mortality(), Some(true));
        assert_eq!(patient("a", [true; 3], 36.0, false, None).label_3y_mortality(), Some(true));
        assert_eq!(patient("a", [true; 3], 40.0, false, None).label_3y_mortality(), Some(false));
        assert_eq!(patient("a", [true; 3], 36.0, true, None).label_3y_mortality(), Some(false));
        assert_eq!(patient("a", [true; 3], 20.0, true, None).label_3y_mortality(), None);
        assert_eq!(patient("a", [true; 3], 20.0, true, None).label_3y_recurrence(), None);
        assert_eq!(patient("a", [true; 3], 20.0, true, Some((10.0, false))).label_3y_recurrence(), Some(true));
    }

    #[test]
    fn censored_at_one_month_gives_empty_binary_table() {
        let ps: Vec<_> = (0..5).map(|i| patient(&i.to_string(), [true; 3], 1.0, true, None)).collect();
        let s = cohort_stats(&ps);
        assert_eq!((s.mortality_pos, s.mortality_neg), (0, 0));
        assert_eq!((s.os_events, s.os_censored), (0, 5));
    }

    #[test]
    fn six_patient_hand_tally() {
        let ps = vec![
            patient("p1", [true; 3], 10.0, false, Some((5.0, false))),
            patient("p2", [true, false, true], 50.0, true, Some((50.0, true))),
            patient("p3", [true; 3], 30.0, true, Some((30.0, true))),
            patient("p4", [false, true, false], 40.0, false, None),
            patient("p5", [true; 3], 2.0, false, Some((2.0, false))),
            patient("p6", [true, true, false], 36.0, true, Some((20.0, false))),
        ];
        let s = cohort_stats(&ps);
        // events: p1 p4 p5; censored: p2 p3 p6
        // mortality: pos p1 p5; neg p2 p4 p6; p3 excluded
        // recurrence: pos p1 p5 p6; neg p2; p3 excluded, p4 unannotated
        let want = CohortStats {
            n: 6,
            n_trimodal: 3,
            os_events: 3,
            os_censored: 3,
            mortality_pos: 2,
            mortality_neg: 3,
            recurrence_pos: 3,
            recurrence_neg: 1,
        };
        assert_eq!(s, want);
    }

    #[test]
    fn count_pair_round_trip() {
        assert_eq!(parse_count_pair("80 / 419"), Some((80, 419)));
        assert_eq!(parse_count_pair("80/419"), Some((80, 419)));
        assert_eq!(parse_count_pair("80 419"), None);
    }

    #[test]
    fn subsets_cover_all_nonempty_masks() {
        let subs = Availability::nonempty_subsets();
        for (i, s) in subs.iter().enumerate() {
            assert!(!s.is_empty());
            assert_eq!(s.subset_index(), Some(i));
        }
        assert_eq!(subs[6], Availability::FULL);
        assert_eq!(Availability::FULL.without(Modality::Rna).to_string(), "I-T");
    }

    #[test]
    fn folds_ten_by_five() {
        let folds = make_folds(10, 5, 3).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.val.len(), 1);
            assert_eq!(f.train.len(), 7);
        }
        assert_eq!(folds, make_folds(10, 5, 3).unwrap());
        assert!(make_folds(10, 1, 3).is_err());
    }

    #[test]
    fn restriction_only_removes() {
        let p = patient("a", [true, false, true], 1.0, false, None);
        let r = p.restricted(Availability::FULL).unwrap();
        assert_eq!(r.availability(), Availability([true, false, true]));
        assert_eq!(p.restricted(Availability::only(Modality::Rna)), Err(Error::NoObservedModality));
    }

    #[test]
    fn padding_rows_are_invalid() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, -2.0]).unwrap();
        assert_eq!(Embedding::new(t).unwrap().valid, vec![true, false, true]);
    }
}
