//! Segmentation metrics (DSC, JAC, HD, ASSD), the metric table, and the
//! min-max cross-method ranking. Distances are in pixels.

use crate::error::{LsclError, Result};

pub const STRUCTURE_NAMES: [&str; 3] = ["LV", "MYO", "RV"];
pub const METRIC_NAMES: [&str; 4] = ["DSC", "JAC", "HD", "ASSD"];

/// h x w integer class map; 0 = background, 1 = LV, 2 = MYO, 3 = RV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w);
        LabelMap { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        LabelMap {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    fn mask(&self, class_id: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class_id).collect()
    }

    fn check_same_shape(&self, other: &LabelMap, op: &str) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(LsclError::shape(
                op,
                format!("{}x{} vs {}x{}", self.h, self.w, other.h, other.w),
            ));
        }
        Ok(())
    }
}

/// 2|A∩B| / (|A|+|B|); both masks empty -> 1, exactly one empty -> 0.
pub fn dice_coefficient(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    pred.check_same_shape(gt, "dice")?;
    let a = pred.mask(class_id);
    let b = gt.mask(class_id);
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    if na == 0 && nb == 0 {
        return Ok(1.0);
    }
    if na == 0 || nb == 0 {
        return Ok(0.0);
    }
    let inter = a.iter().zip(&b).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// |A∩B| / |A∪B|; empty conventions as for dice.
pub fn jaccard(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    pred.check_same_shape(gt, "jaccard")?;
    let a = pred.mask(class_id);
    let b = gt.mask(class_id);
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    if na == 0 && nb == 0 {
        return Ok(1.0);
    }
    if na == 0 || nb == 0 {
        return Ok(0.0);
    }
    let inter = a.iter().zip(&b).filter(|(&x, &y)| x && y).count();
    let union = na + nb - inter;
    Ok(inter as f64 / union as f64)
}

fn class_points(map: &LabelMap, class_id: u8) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for y in 0..map.h {
        for x in 0..map.w {
            if map.get(y, x) == class_id {
                pts.push((y, x));
            }
        }
    }
    pts
}

fn diagonal(map: &LabelMap) -> f64 {
    (((map.h * map.h + map.w * map.w) as f64).max(0.0)).sqrt()
}

fn min_dist_sq(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|&(y, x)| {
            let dy = p.0 as f64 - y as f64;
            let dx = p.1 as f64 - x as f64;
            dy * dy + dx * dx
        })
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric Hausdorff distance between the pixel sets of `class_id`.
/// Both empty -> 0; one empty -> image diagonal length.
pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    pred.check_same_shape(gt, "hausdorff")?;
    let a = class_points(pred, class_id);
    let b = class_points(gt, class_id);
    if a.is_empty() && b.is_empty() {
        return Ok(0.0);
    }
    if a.is_empty() || b.is_empty() {
        return Ok(diagonal(pred));
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&p| min_dist_sq(p, to))
            .fold(0.0f64, f64::max)
    };
    Ok(directed(&a, &b).max(directed(&b, &a)).sqrt())
}

/// Boundary pixels of `class_id`: class pixels with at least one
/// four-neighbor outside the class; the image border counts as outside.
pub fn boundary_points(map: &LabelMap, class_id: u8) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for y in 0..map.h {
        for x in 0..map.w {
            if map.get(y, x) != class_id {
                continue;
            }
            let outside = (y == 0 || map.get(y - 1, x) != class_id)
                || (y + 1 == map.h || map.get(y + 1, x) != class_id)
                || (x == 0 || map.get(y, x - 1) != class_id)
                || (x + 1 == map.w || map.get(y, x + 1) != class_id);
            if outside {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// Average symmetric surface distance over the class boundaries.
pub fn assd(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    pred.check_same_shape(gt, "assd")?;
    let a = boundary_points(pred, class_id);
    let b = boundary_points(gt, class_id);
    if a.is_empty() && b.is_empty() {
        return Ok(0.0);
    }
    if a.is_empty() || b.is_empty() {
        return Ok(diagonal(pred));
    }
    let sum_a: f64 = a.iter().map(|&p| min_dist_sq(p, &b).sqrt()).sum();
    let sum_b: f64 = b.iter().map(|&p| min_dist_sq(p, &a).sqrt()).sum();
    Ok((sum_a + sum_b) / (a.len() + b.len()) as f64)
}

/// One (method, vendor, structure, metric) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub vendor: String,
    /// "LV", "MYO", "RV" or "avg" for the structure-averaged row.
    pub structure: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, method: &str, vendor: &str, structure: &str, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| {
            r.method == method && r.vendor == vendor && r.structure == structure && r.metric == metric
        })
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.rows {
            if !m.contains(&r.method) {
                m.push(r.method.clone());
            }
        }
        m
    }

    pub fn vendors_of(&self, method: &str) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if r.method == method && !v.contains(&r.vendor) {
                v.push(r.vendor.clone());
            }
        }
        v.sort();
        v
    }

    pub fn merge(&mut self, other: &MetricTable) {
        self.rows.extend(other.rows.iter().cloned());
    }

    /// `method,vendor,structure,metric,mean,std` with one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,vendor,structure,metric,mean,std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6}\n",
                r.method, r.vendor, r.structure, r.metric, r.mean, r.std
            ));
        }
        out
    }

    fn metrics_present(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.rows {
            if r.structure == "avg" && !m.contains(&r.metric) {
                m.push(r.metric.clone());
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodScore {
    pub method: String,
    pub dsc_score: f64,
    pub hd_score: f64,
    pub minmax_score: f64,
}

/// Challenge-style ranking over structure-averaged cells. DSC Score and HD
/// Score are unweighted vendor means; the min-max score normalizes each
/// (vendor, metric) cell across methods (higher-better for DSC/JAC,
/// lower-better for HD/ASSD, 0 when all methods tie) and averages.
pub fn minmax_score(table: &MetricTable) -> Result<Vec<MethodScore>> {
    let methods = table.methods();
    if methods.len() < 2 {
        return Err(LsclError::TooFewMethods(methods.len()));
    }
    let vendors = table.vendors_of(&methods[0]);
    for m in &methods[1..] {
        let v = table.vendors_of(m);
        if v != vendors {
            return Err(LsclError::VendorMismatch(format!(
                "{m}: {v:?} vs {}: {vendors:?}",
                methods[0]
            )));
        }
    }
    let metrics = table.metrics_present();
    let higher_better = |metric: &str| matches!(metric, "DSC" | "JAC");

    let cell = |method: &str, vendor: &str, metric: &str| -> Result<f64> {
        table
            .get(method, vendor, "avg", metric)
            .map(|r| r.mean)
            .ok_or_else(|| {
                LsclError::VendorMismatch(format!("missing cell {method}/{vendor}/avg/{metric}"))
            })
    };

    let mut scores = Vec::with_capacity(methods.len());
    for method in &methods {
        let mut dsc_acc = 0.0;
        let mut hd_acc = 0.0;
        for vendor in &vendors {
            dsc_acc += cell(method, vendor, "DSC")?;
            hd_acc += cell(method, vendor, "HD")?;
        }
        let mut norm_sum = 0.0;
        let mut norm_count = 0usize;
        for vendor in &vendors {
            for metric in &metrics {
                let values: Vec<f64> = methods
                    .iter()
                    .map(|m| cell(m, vendor, metric))
                    .collect::<Result<_>>()?;
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = cell(method, vendor, metric)?;
                let normalized = if hi == lo {
                    0.0
                } else if higher_better(metric) {
                    (v - lo) / (hi - lo)
                } else {
                    (hi - v) / (hi - lo)
                };
                norm_sum += normalized;
                norm_count += 1;
            }
        }
        scores.push(MethodScore {
            method: method.clone(),
            dsc_score: dsc_acc / vendors.len() as f64,
            hd_score: hd_acc / vendors.len() as f64,
            minmax_score: norm_sum / norm_count as f64,
        });
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn map_from(h: usize, w: usize, ones: &[(usize, usize)]) -> LabelMap {
        let mut m = LabelMap::zeros(h, w);
        for &(y, x) in ones {
            m.data[y * w + x] = 1;
        }
        m
    }

    fn random_mask(h: usize, w: usize, rng: &mut Rng, p: f64) -> LabelMap {
        LabelMap::new(
            h,
            w,
            (0..h * w)
                .map(|_| if rng.uniform() < p { 1 } else { 0 })
                .collect(),
        )
    }

    #[test]
    fn dice_identical_disjoint_and_mixed() {
        let a = map_from(2, 2, &[(0, 0), (0, 1)]); // top row
        let b = map_from(2, 2, &[(0, 0), (1, 0)]); // left column
        assert_eq!(dice_coefficient(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&a, &b, 1).unwrap(), 0.5);
        let c = map_from(2, 2, &[(1, 1)]);
        assert_eq!(dice_coefficient(&a, &c, 1).unwrap(), 0.0);
        // Empty conventions.
        let e = LabelMap::zeros(2, 2);
        assert_eq!(dice_coefficient(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&a, &e, 1).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_values_and_identity() {
        let a = map_from(2, 2, &[(0, 0), (0, 1)]);
        let b = map_from(2, 2, &[(0, 0), (1, 0)]);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        assert!((jaccard(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // JAC = DSC / (2 - DSC) on random pairs.
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let x = random_mask(8, 8, &mut rng, 0.4);
            let y = random_mask(8, 8, &mut rng, 0.4);
            let d = dice_coefficient(&x, &y, 1).unwrap();
            let j = jaccard(&x, &y, 1).unwrap();
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn hausdorff_hand_cases() {
        let a = map_from(5, 5, &[(0, 0)]);
        let b = map_from(5, 5, &[(3, 4)]);
        assert!((hausdorff(&a, &b, 1).unwrap() - 5.0).abs() < 1e-12);
        let a2 = map_from(5, 5, &[(0, 0), (0, 3)]);
        let b2 = map_from(5, 5, &[(0, 0)]);
        assert!((hausdorff(&a2, &b2, 1).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
        // One empty -> diagonal.
        let e = LabelMap::zeros(5, 5);
        assert!((hausdorff(&a, &e, 1).unwrap() - 50.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn assd_hand_cases_and_bound() {
        let a = map_from(4, 4, &[(0, 0)]);
        let b = map_from(4, 4, &[(0, 2)]);
        assert!((assd(&a, &b, 1).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(assd(&a, &a, 1).unwrap(), 0.0);
        // ASSD <= HD on random pairs (mean <= max).
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let x = random_mask(8, 8, &mut rng, 0.3);
            let y = random_mask(8, 8, &mut rng, 0.3);
            let hd = hausdorff(&x, &y, 1).unwrap();
            let sd = assd(&x, &y, 1).unwrap();
            assert!(sd <= hd + 1e-12, "assd {sd} > hd {hd}");
        }
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let x = random_mask(6, 6, &mut rng, 0.4);
            let y = random_mask(6, 6, &mut rng, 0.4);
            assert_eq!(
                dice_coefficient(&x, &y, 1).unwrap(),
                dice_coefficient(&y, &x, 1).unwrap()
            );
            assert_eq!(jaccard(&x, &y, 1).unwrap(), jaccard(&y, &x, 1).unwrap());
            assert_eq!(hausdorff(&x, &y, 1).unwrap(), hausdorff(&y, &x, 1).unwrap());
            assert_eq!(assd(&x, &y, 1).unwrap(), assd(&y, &x, 1).unwrap());
            let d = dice_coefficient(&x, &y, 1).unwrap();
            let j = jaccard(&x, &y, 1).unwrap();
            assert!(d >= j);
            assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = LabelMap::zeros(2, 2);
        let b = LabelMap::zeros(3, 3);
        assert!(dice_coefficient(&a, &b, 1).is_err());
        assert!(hausdorff(&a, &b, 1).is_err());
    }

    fn table_1v(methods: &[(&str, f64, f64)]) -> MetricTable {
        let mut t = MetricTable::default();
        for &(m, dsc, hd) in methods {
            for (metric, mean) in [("DSC", dsc), ("HD", hd)] {
                t.rows.push(MetricRow {
                    method: m.into(),
                    vendor: "A".into(),
                    structure: "avg".into(),
                    metric: metric.into(),
                    mean,
                    std: 0.0,
                });
            }
        }
        t
    }

    #[test]
    fn minmax_hand_normalization() {
        let t = table_1v(&[("m1", 0.80, 20.0), ("m2", 0.85, 15.0), ("m3", 0.90, 10.0)]);
        let s = minmax_score(&t).unwrap();
        assert!((s[0].minmax_score - 0.0).abs() < 1e-12);
        assert!((s[1].minmax_score - 0.5).abs() < 1e-12);
        assert!((s[2].minmax_score - 1.0).abs() < 1e-12);
        assert!((s[0].dsc_score - 0.80).abs() < 1e-12);
        assert!((s[0].hd_score - 20.0).abs() < 1e-12);
    }

    #[test]
    fn uniformly_worst_method_scores_zero() {
        let t = table_1v(&[("worst", 0.70, 30.0), ("mid", 0.80, 20.0), ("best", 0.90, 10.0)]);
        let s = minmax_score(&t).unwrap();
        assert_eq!(s[0].minmax_score, 0.0);
        assert_eq!(s[2].minmax_score, 1.0);
    }

    #[test]
    fn identical_methods_score_zero() {
        let t = table_1v(&[("a", 0.8, 12.0), ("b", 0.8, 12.0)]);
        let s = minmax_score(&t).unwrap();
        assert_eq!(s[0].minmax_score, 0.0);
        assert_eq!(s[1].minmax_score, 0.0);
    }

    #[test]
    fn minmax_requires_two_methods() {
        let t = table_1v(&[("only", 0.8, 12.0)]);
        assert!(matches!(minmax_score(&t), Err(LsclError::TooFewMethods(1))));
    }

    #[test]
    fn minmax_invariant_under_affine_rescaling() {
        let t = table_1v(&[("m1", 0.80, 20.0), ("m2", 0.85, 15.0), ("m3", 0.90, 10.0)]);
        let mut t2 = t.clone();
        for r in t2.rows.iter_mut() {
            if r.metric == "HD" {
                r.mean = r.mean * 3.5 + 7.0;
            }
        }
        let s1 = minmax_score(&t).unwrap();
        let s2 = minmax_score(&t2).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a.minmax_score - b.minmax_score).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_schema_is_stable() {
        let t = table_1v(&[("a", 0.8, 12.0), ("b", 0.9, 10.0)]);
        let csv = t.to_csv();
        assert!(csv.starts_with("method,vendor,structure,metric,mean,std\n"));
        assert!(csv.contains("a,A,avg,DSC,0.800000,0.000000"));
    }
}
