use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::softmax::{row_quantile, softmax_rows};
use super::{AttentionError, AttentionMap, ProjectionWeights, RegionConfig, RegionMask, Segment, ThresholdMode, TokenStream};

/// `Q`, `K`, `V` for the whole stream plus the segment layout needed to
/// address sub-blocks.
#[derive(Debug, Clone)]
pub struct Projected {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    reference: Range<usize>,
    story: Range<usize>,
    subject: Range<usize>,
    element: Range<usize>,
}

impl Projected {
    pub fn q_sub(&self) -> ArrayView2<'_, f64> {
        self.q.slice(s![self.subject.clone(), ..])
    }

    pub fn q_ele(&self) -> ArrayView2<'_, f64> {
        self.q.slice(s![self.element.clone(), ..])
    }

    pub fn q_story(&self) -> ArrayView2<'_, f64> {
        self.q.slice(s![self.story.clone(), ..])
    }

    pub fn q_ref(&self) -> ArrayView2<'_, f64> {
        self.q.slice(s![self.reference.clone(), ..])
    }

    pub fn k_s(&self) -> ArrayView2<'_, f64> {
        self.k.slice(s![self.story.clone(), ..])
    }

    pub fn k_r(&self) -> ArrayView2<'_, f64> {
        self.k.slice(s![self.reference.clone(), ..])
    }

    pub fn v_s(&self) -> ArrayView2<'_, f64> {
        self.v.slice(s![self.story.clone(), ..])
    }

    pub fn v_r(&self) -> ArrayView2<'_, f64> {
        self.v.slice(s![self.reference.clone(), ..])
    }
}

pub fn project_qkv(stream: &TokenStream, weights: &ProjectionWeights) -> Result<Projected, AttentionError> {
    if stream.width() != weights.width() {
        return Err(AttentionError::Shape(format!(
            "stream width {} does not match projection width {}",
            stream.width(),
            weights.width()
        )));
    }
    let z = stream.embeddings();
    Ok(Projected {
        q: z.dot(&weights.w_q),
        k: z.dot(&weights.w_k),
        v: z.dot(&weights.w_v),
        reference: stream.reference(),
        story: stream.story(),
        subject: stream.subject_span(),
        element: stream.element_span(),
    })
}

fn scaled_logits(q: ArrayView2<f64>, k: ArrayView2<f64>, d: usize) -> Result<Array2<f64>, AttentionError> {
    if q.ncols() != k.ncols() {
        return Err(AttentionError::Shape(format!("query width {} vs key width {}", q.ncols(), k.ncols())));
    }
    if d == 0 {
        return Err(AttentionError::Shape("d must be positive".into()));
    }
    Ok(q.dot(&k.t()) / (d as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct SubjectAttention {
    /// `A_sub`, one row per subject token.
    pub map: AttentionMap,
    /// Mean of the rows of `A_sub`.
    pub aggregated: Array1<f64>,
}

/// `A_sub = softmax(Q_sub K_s^T / sqrt(d))`, plus its row mean.
pub fn subject_attention(
    q_sub: ArrayView2<f64>,
    k_s: ArrayView2<f64>,
    d: usize,
) -> Result<SubjectAttention, AttentionError> {
    if q_sub.nrows() == 0 {
        return Err(AttentionError::EmptySpan("subject"));
    }
    if k_s.nrows() == 0 {
        return Err(AttentionError::EmptySpan("story image"));
    }
    let weights = softmax_rows(scaled_logits(q_sub, k_s, d)?);
    let aggregated = weights.mean_axis(Axis(0)).expect("non-empty rows");
    Ok(SubjectAttention {
        map: AttentionMap { weights, rows: Segment::SubjectTokens, cols: Segment::Story },
        aggregated,
    })
}

/// Splits story positions into complementary subject / element masks.
pub fn binarize_masks(
    a_sub: ArrayView1<f64>,
    tau: f64,
    mode: ThresholdMode,
    grid: (usize, usize),
) -> Result<(RegionMask, RegionMask), AttentionError> {
    let cut = match mode {
        ThresholdMode::Relative => tau * a_sub.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ThresholdMode::Absolute => tau,
    };
    let subject = RegionMask::new(grid, a_sub.iter().map(|&a| a >= cut).collect())?;
    let element = subject.complement();
    Ok((subject, element))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutualAttention {
    /// Subject location in the reference image.
    pub m_ref: RegionMask,
    /// For each story position in the subject region, its most-attended
    /// reference position (lowest index on ties); `None` elsewhere.
    pub matches: Vec<Option<usize>>,
}

/// Reference positions exchanging strong attention with the subject region.
///
/// Reference token `j` joins `M_ref` when some story token `i` with
/// `M_sub[i]` has `s_to_r[i, j]` and `r_to_s[j, i]` both at or above the
/// `quantile` of their respective rows.
pub fn mutually_attended(
    s_to_r: ArrayView2<f64>,
    r_to_s: ArrayView2<f64>,
    m_sub: &RegionMask,
    quantile: f64,
) -> Result<MutualAttention, AttentionError> {
    let (n_story, n_ref) = s_to_r.dim();
    if r_to_s.dim() != (n_ref, n_story) {
        return Err(AttentionError::Shape(format!(
            "cross maps {:?} and {:?} are not transposed shapes",
            s_to_r.dim(),
            r_to_s.dim()
        )));
    }
    if m_sub.len() != n_story {
        return Err(AttentionError::Shape(format!("mask has {} entries for {n_story} story tokens", m_sub.len())));
    }
    if n_ref != n_story {
        return Err(AttentionError::Shape("reference and story grids differ in size".into()));
    }

    let ref_cut: Vec<f64> = r_to_s.rows().into_iter().map(|r| row_quantile(r, quantile)).collect();
    let mut m_ref = vec![false; n_ref];
    let mut matches = vec![None; n_story];
    for i in (0..n_story).filter(|&i| m_sub.get(i)) {
        let row = s_to_r.row(i);
        let cut = row_quantile(row, quantile);
        let mut best = 0;
        for j in 0..n_ref {
            if row[j] > row[best] {
                best = j;
            }
            if row[j] >= cut && r_to_s[[j, i]] >= ref_cut[j] {
                m_ref[j] = true;
            }
        }
        matches[i] = Some(best);
    }
    Ok(MutualAttention { m_ref: RegionMask::new(m_sub.grid, m_ref)?, matches })
}

/// Region-scoped value mixing: `V_s'[i] = lambda V_s[i] + (1 - lambda)
/// V_r[match[i]]` where `M_sub[i]` and `M_ref[match[i]]` hold; every other
/// story value passes through unchanged.
pub fn mix_values(
    v_s: ArrayView2<f64>,
    v_r: ArrayView2<f64>,
    m_sub: &RegionMask,
    m_ref: &RegionMask,
    matches: &[Option<usize>],
    lambda: f64,
) -> Result<Array2<f64>, AttentionError> {
    if v_s.dim() != v_r.dim() {
        return Err(AttentionError::Shape(format!("V_s {:?} vs V_r {:?}", v_s.dim(), v_r.dim())));
    }
    if m_sub.len() != v_s.nrows() || m_ref.len() != v_r.nrows() || matches.len() != v_s.nrows() {
        return Err(AttentionError::Shape("mask or match length differs from token count".into()));
    }
    let mut out = v_s.to_owned();
    for (i, matched) in matches.iter().enumerate() {
        let Some(j) = *matched else { continue };
        if j >= v_r.nrows() {
            return Err(AttentionError::Shape(format!("match {i} -> {j} out of range")));
        }
        if m_sub.get(i) && m_ref.get(j) {
            let blended = &v_s.row(i) * lambda + &v_r.row(j) * (1.0 - lambda);
            out.row_mut(i).assign(&blended);
        }
    }
    Ok(out)
}

/// `A_ele = softmax(Q_ele K_s^T / sqrt(d) + alpha M_ele)`, the bias
/// broadcast over rows.
pub fn element_attention(
    q_ele: ArrayView2<f64>,
    k_s: ArrayView2<f64>,
    m_ele: &RegionMask,
    alpha: f64,
    d: usize,
) -> Result<AttentionMap, AttentionError> {
    if q_ele.nrows() == 0 {
        return Err(AttentionError::EmptySpan("element"));
    }
    if m_ele.len() != k_s.nrows() {
        return Err(AttentionError::Shape(format!("mask has {} entries for {} keys", m_ele.len(), k_s.nrows())));
    }
    let mut logits = scaled_logits(q_ele, k_s, d)?;
    let bias = Array1::from(m_ele.as_f64()) * alpha;
    logits += &bias;
    Ok(AttentionMap { weights: softmax_rows(logits), rows: Segment::ElementTokens, cols: Segment::Story })
}

/// Plain joint attention with a residual: `Z + softmax(Q K^T / sqrt(d)) V`.
pub fn joint_attention(stream: &TokenStream, weights: &ProjectionWeights) -> Result<Array2<f64>, AttentionError> {
    let p = project_qkv(stream, weights)?;
    let a = softmax_rows(scaled_logits(p.q.view(), p.k.view(), stream.width())?);
    Ok(stream.embeddings() + &a.dot(&p.v))
}

#[derive(Debug, Clone)]
pub struct LayerDiagnostics {
    pub subject: SubjectAttention,
    pub m_ref: RegionMask,
    pub matches: Vec<Option<usize>>,
    /// `A_ele` over story keys.
    pub element: AttentionMap,
    /// Mean `A_ele` mass on element-region keys (0 when the region is empty).
    pub element_mass: f64,
    /// Story tokens whose value was blended with a reference value.
    pub mixed_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub embeddings: Array2<f64>,
    pub m_sub: RegionMask,
    pub m_ele: RegionMask,
    pub diagnostics: LayerDiagnostics,
}

/// One region-aware joint-attention layer.
pub fn attention_layer_forward(
    stream: &TokenStream,
    weights: &ProjectionWeights,
    config: &RegionConfig,
) -> Result<LayerOutput, AttentionError> {
    config.validate()?;
    let d = config.d.unwrap_or(stream.width());
    let grid = stream.grid();
    let p = project_qkv(stream, weights)?;

    let subject = subject_attention(p.q_sub(), p.k_s(), d)?;
    let (m_sub, m_ele) = binarize_masks(subject.aggregated.view(), config.tau, config.threshold_mode, grid)?;

    let logits = scaled_logits(p.q.view(), p.k.view(), d)?;
    let story = stream.story();
    let reference = stream.reference();
    let s_to_r = softmax_rows(logits.slice(s![story.clone(), reference.clone()]).to_owned());
    let r_to_s = softmax_rows(logits.slice(s![reference.clone(), story.clone()]).to_owned());
    let mutual = mutually_attended(s_to_r.view(), r_to_s.view(), &m_sub, config.ra_quantile)?;

    let mixed = mix_values(p.v_s(), p.v_r(), &m_sub, &mutual.m_ref, &mutual.matches, config.lambda_mix)?;
    let mixed_tokens = mutual
        .matches
        .iter()
        .enumerate()
        .filter(|(i, m)| m.is_some_and(|j| m_sub.get(*i) && mutual.m_ref.get(j)))
        .count();
    let mut values = p.v.clone();
    values.slice_mut(s![story.clone(), ..]).assign(&mixed);

    let element = element_attention(p.q_ele(), p.k_s(), &m_ele, config.alpha, d)?;
    let element_mask = m_ele.as_f64();
    let element_mass = element
        .weights
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&element_mask).map(|(a, m)| a * m).sum::<f64>())
        .sum::<f64>()
        / element.weights.nrows() as f64;

    let mut biased = logits;
    let bias = Array1::from(element_mask) * config.alpha;
    {
        let mut block = biased.slice_mut(s![stream.element_span(), story]);
        block += &bias;
    }
    let attention = softmax_rows(biased);
    let embeddings = stream.embeddings() + &attention.dot(&values);

    Ok(LayerOutput {
        embeddings,
        m_sub,
        m_ele,
        diagnostics: LayerDiagnostics {
            subject,
            m_ref: mutual.m_ref,
            matches: mutual.matches,
            element,
            element_mass,
            mixed_tokens,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn grid1(n: usize) -> (usize, usize) {
        (1, n)
    }

    #[test]
    fn projection_cases() {
        let z = arr2(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let stream = TokenStream::new(z.clone(), 1, (1, 2), 0..1, 1..1).unwrap();
        let w = ProjectionWeights::new(arr2(&[[1.0, 0.0], [1.0, 1.0]]), Array2::zeros((2, 2)), Array2::eye(2)).unwrap();
        let p = project_qkv(&stream, &w).unwrap();
        assert_eq!(p.q.row(0), arr1(&[3.0, 2.0]));
        assert!(p.k.iter().all(|x| *x == 0.0));
        assert_eq!(p.v, z);
        let id = project_qkv(&stream, &ProjectionWeights::identity(2)).unwrap();
        assert_eq!(id.q, z);
        assert!(project_qkv(&stream, &ProjectionWeights::identity(3)).is_err());
    }

    #[test]
    fn subject_attention_cases() {
        let one = subject_attention(arr2(&[[0.3, 0.1]]).view(), arr2(&[[1.0, 2.0]]).view(), 2).unwrap();
        assert_eq!(one.map.weights, arr2(&[[1.0]]));

        let uniform = subject_attention(arr2(&[[0.0, 1.0]]).view(), arr2(&[[5.0, 0.0], [-2.0, 0.0], [1.0, 0.0]]).view(), 2)
            .unwrap();
        for x in uniform.map.weights.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let scalar = subject_attention(arr2(&[[2.0]]).view(), arr2(&[[1.0], [0.0]]).view(), 1).unwrap();
        let e2 = 2f64.exp();
        assert!((scalar.map.weights[[0, 0]] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((scalar.map.weights[[0, 1]] - 1.0 / (e2 + 1.0)).abs() < 1e-15);

        let empty = Array2::<f64>::zeros((0, 1));
        assert_eq!(
            subject_attention(empty.view(), arr2(&[[1.0]]).view(), 1).unwrap_err(),
            AttentionError::EmptySpan("subject")
        );
    }

    #[test]
    fn aggregation_is_row_mean() {
        let a = subject_attention(arr2(&[[1.0], [-1.0]]).view(), arr2(&[[1.0], [0.0]]).view(), 1).unwrap();
        let w = &a.map.weights;
        assert!((a.aggregated[0] - (w[[0, 0]] + w[[1, 0]]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn binarize_cases() {
        let (m_sub, m_ele) =
            binarize_masks(arr1(&[0.7, 0.2, 0.1]).view(), 0.5, ThresholdMode::Relative, grid1(3)).unwrap();
        assert_eq!(m_sub.values, [true, false, false]);
        assert_eq!(m_ele.values, [false, true, true]);

        let (all, none) =
            binarize_masks(arr1(&[0.7, 0.2, 0.1]).view(), f64::MIN_POSITIVE, ThresholdMode::Relative, grid1(3)).unwrap();
        assert!(all.values.iter().all(|v| *v));
        assert!(none.values.iter().all(|v| !*v));

        let (abs, _) = binarize_masks(arr1(&[0.7, 0.2, 0.1]).view(), 0.15, ThresholdMode::Absolute, grid1(3)).unwrap();
        assert_eq!(abs.values, [true, true, false]);
    }

    #[test]
    fn uniform_row_is_all_subject() {
        // every entry equals the max, so a[j] >= tau * max for any tau <= 1
        for n in 1..6 {
            let row = Array1::from_elem(n, 1.0 / n as f64);
            for tau in [0.01, 0.35, 0.5, 0.99, 1.0] {
                let (m, _) = binarize_masks(row.view(), tau, ThresholdMode::Relative, grid1(n)).unwrap();
                let by_definition: Vec<bool> = row.iter().map(|a| *a >= tau * row[0]).collect();
                assert_eq!(m.values, by_definition);
                assert!(m.values.iter().all(|v| *v));
            }
        }
    }

    #[test]
    fn mutual_identity_and_empty() {
        let eye = Array2::<f64>::eye(2);
        let m_sub = RegionMask::new(grid1(2), vec![true, false]).unwrap();
        let got = mutually_attended(eye.view(), eye.view(), &m_sub, 0.75).unwrap();
        assert_eq!(got.m_ref.values, [true, false]);
        assert_eq!(got.matches, [Some(0), None]);

        let none = RegionMask::filled(grid1(2), false);
        let got = mutually_attended(eye.view(), eye.view(), &none, 0.75).unwrap();
        assert_eq!(got.m_ref.count(), 0);
        assert!(got.matches.iter().all(Option::is_none));
    }

    #[test]
    fn mutual_two_by_two_hand_case() {
        let s_to_r = arr2(&[[0.9, 0.1], [0.2, 0.8]]);
        let r_to_s = s_to_r.t().to_owned();
        let m_sub = RegionMask::filled(grid1(2), true);
        let got = mutually_attended(s_to_r.view(), r_to_s.view(), &m_sub, 0.5).unwrap();

        // enumerate every (i, j) pair against the definition
        let q = |row: &[f64]| (row[0] + row[1]) / 2.0; // median of two values
        let mut expected = [false, false];
        for i in 0..2 {
            for j in 0..2 {
                let srow = [s_to_r[[i, 0]], s_to_r[[i, 1]]];
                let rrow = [r_to_s[[j, 0]], r_to_s[[j, 1]]];
                if s_to_r[[i, j]] >= q(&srow) && r_to_s[[j, i]] >= q(&rrow) {
                    expected[j] = true;
                }
            }
        }
        assert_eq!(got.m_ref.values, expected);
        assert_eq!(got.m_ref.values, [true, true]);
        assert_eq!(got.matches, [Some(0), Some(1)]);
    }

    #[test]
    fn match_ties_pick_lowest_index() {
        let s_to_r = arr2(&[[0.5, 0.5]]).broadcast((2, 2)).unwrap().to_owned();
        let m_sub = RegionMask::filled(grid1(2), true);
        let got = mutually_attended(s_to_r.view(), s_to_r.t(), &m_sub, 0.5).unwrap();
        assert_eq!(got.matches, [Some(0), Some(0)]);
    }

    #[test]
    fn mixing_cases() {
        let v_s = arr2(&[[2.0, 0.0], [5.0, 5.0]]);
        let v_r = arr2(&[[0.0, 2.0], [9.0, 9.0]]);
        let m_sub = RegionMask::new(grid1(2), vec![true, false]).unwrap();
        let m_ref = RegionMask::new(grid1(2), vec![true, false]).unwrap();
        let matches = [Some(0), None];

        let half = mix_values(v_s.view(), v_r.view(), &m_sub, &m_ref, &matches, 0.5).unwrap();
        assert_eq!(half, arr2(&[[1.0, 1.0], [5.0, 5.0]]));

        let keep = mix_values(v_s.view(), v_r.view(), &m_sub, &m_ref, &matches, 1.0).unwrap();
        assert_eq!(keep, v_s);

        let off = RegionMask::filled(grid1(2), false);
        assert_eq!(mix_values(v_s.view(), v_r.view(), &off, &m_ref, &matches, 0.0).unwrap(), v_s);

        let swap = mix_values(v_s.view(), v_r.view(), &m_sub, &m_ref, &matches, 0.0).unwrap();
        assert_eq!(swap.row(0), v_r.row(0));

        // match into a reference position outside M_ref leaves the value alone
        let no_ref = RegionMask::filled(grid1(2), false);
        assert_eq!(mix_values(v_s.view(), v_r.view(), &m_sub, &no_ref, &matches, 0.0).unwrap(), v_s);

        assert!(mix_values(v_s.view(), arr2(&[[1.0, 2.0]]).view(), &m_sub, &m_ref, &matches, 0.5).is_err());
    }

    #[test]
    fn element_attention_cases() {
        let q = arr2(&[[0.0, 0.0]]);
        let k = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let m = RegionMask::new(grid1(3), vec![true, false, false]).unwrap();
        let a = element_attention(q.view(), k.view(), &m, std::f64::consts::LN_2, 2).unwrap();
        for (got, want) in a.weights.iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }

        let q = arr2(&[[0.3, -1.2], [2.0, 0.5]]);
        let plain = softmax_rows(q.dot(&k.t()) / 2f64.sqrt());
        let zero_alpha = element_attention(q.view(), k.view(), &m, 0.0, 2).unwrap();
        let no_mask = element_attention(q.view(), k.view(), &RegionMask::filled(grid1(3), false), 7.0, 2).unwrap();
        for ((a, b), c) in zero_alpha.weights.iter().zip(no_mask.weights.iter()).zip(plain.iter()) {
            assert!((a - c).abs() < 1e-9);
            assert!((b - c).abs() < 1e-15);
        }
        assert!(matches!(
            element_attention(Array2::zeros((0, 2)).view(), k.view(), &m, 1.0, 2),
            Err(AttentionError::EmptySpan("element"))
        ));
    }

    #[test]
    fn doubling_d_shrinks_logits_by_sqrt2() {
        let q = arr2(&[[1.5, -0.5, 2.0]]);
        let k = arr2(&[[0.2, 1.0, -1.0], [3.0, 0.0, 0.5]]);
        let l3 = scaled_logits(q.view(), k.view(), 3).unwrap();
        let l6 = scaled_logits(q.view(), k.view(), 6).unwrap();
        for (a, b) in l3.iter().zip(l6.iter()) {
            assert!((a / b - 2f64.sqrt()).abs() < 1e-12);
        }
    }
}
