//! Span-corruption denoising examples.

use rand::seq::index::sample;
use rand::Rng;

use super::tokenizer::{EOS, SENTINEL};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Denoising {
    /// Input with each dropped span replaced by one sentinel.
    pub enc: Vec<usize>,
    /// For each span: the sentinel then the dropped tokens; ends with EOS.
    pub target: Vec<usize>,
}

/// Splits `total` into `parts` nonempty lengths uniformly over compositions.
fn segment<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let len = c - prev;
            prev = c;
            len
        })
        .collect()
}

/// Returns `Ok(None)` for sequences shorter than 2.
pub fn span_corrupt<R: Rng + ?Sized>(tokens: &[usize], rate: f64, mean_span: f64, rng: &mut R) -> Result<Option<Denoising>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::config(format!("corruption rate {} outside (0, 1)", rate)));
    }
    if !(mean_span >= 1.0) {
        return Err(Error::config(format!("mean span {} below 1", mean_span)));
    }
    let n = tokens.len();
    if n < 2 {
        return Ok(None);
    }
    let noise = ((n as f64 * rate).round() as usize).min(n - 1);
    if noise == 0 {
        return Ok(Some(Denoising { enc: tokens.to_vec(), target: vec![EOS] }));
    }
    let spans = ((noise as f64 / mean_span).round() as usize).clamp(1, noise.min(n - noise));
    let noise_lens = segment(noise, spans, rng);
    let keep_lens = segment(n - noise, spans, rng);

    let mut enc = Vec::with_capacity(n - noise + spans);
    let mut target = Vec::with_capacity(noise + spans + 1);
    let mut pos = 0;
    for (k, d) in keep_lens.into_iter().zip(noise_lens) {
        enc.extend_from_slice(&tokens[pos..pos + k]);
        pos += k;
        enc.push(SENTINEL);
        target.push(SENTINEL);
        target.extend_from_slice(&tokens[pos..pos + d]);
        pos += d;
    }
    target.push(EOS);
    Ok(Some(Denoising { enc, target }))
}

/// Inverts `span_corrupt` for inputs free of sentinel ids.
pub fn reconstruct(ex: &Denoising) -> Result<Vec<usize>> {
    let body = ex.target.strip_suffix(&[EOS]).ok_or_else(|| Error::Input("target lacks EOS".into()))?;
    let mut spans = body.split(|&t| t == SENTINEL);
    if spans.next().map_or(false, |s| !s.is_empty()) {
        return Err(Error::Input("target must start with a sentinel".into()));
    }
    let mut out = Vec::new();
    for &t in &ex.enc {
        if t == SENTINEL {
            out.extend_from_slice(spans.next().ok_or_else(|| Error::Input("more sentinels than spans".into()))?);
        } else {
            out.push(t);
        }
    }
    if spans.next().is_some() {
        return Err(Error::Input("unused target spans".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize) -> Vec<usize> {
        (0..n).map(|i| 3 + i % 200).collect()
    }

    #[test]
    fn vanishing_rate_leaves_input_intact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = span_corrupt(&seq(40), 1e-6, 3.0, &mut rng).unwrap().unwrap();
        assert_eq!(ex.enc, seq(40));
        assert_eq!(ex.target, vec![EOS]);
    }

    #[test]
    fn short_sequences_are_skipped_and_bad_rates_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(span_corrupt(&[7], 0.15, 3.0, &mut rng).unwrap(), None);
        assert!(span_corrupt(&seq(10), 0.0, 3.0, &mut rng).is_err());
        assert!(span_corrupt(&seq(10), 1.0, 3.0, &mut rng).is_err());
        assert!(span_corrupt(&seq(10), 0.2, 0.5, &mut rng).is_err());
    }

    #[test]
    fn fixed_seed_is_repeatable_and_reconstructs() {
        let a = span_corrupt(&seq(64), 0.15, 3.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().unwrap();
        let b = span_corrupt(&seq(64), 0.15, 3.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().unwrap();
        assert_eq!(a, b);
        assert_eq!(reconstruct(&a).unwrap(), seq(64));
        assert_eq!(a.enc.iter().filter(|&&t| t == SENTINEL).count(), 3);
    }

    #[test]
    fn measured_corruption_rate_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut dropped, mut total) = (0usize, 0usize);
        for i in 0..10_000 {
            let n = 20 + i % 109;
            let ex = span_corrupt(&seq(n), 0.15, 3.0, &mut rng).unwrap().unwrap();
            let sentinels = ex.enc.iter().filter(|&&t| t == SENTINEL).count();
            dropped += ex.target.len() - 1 - sentinels;
            total += n;
        }
        let frac = dropped as f64 / total as f64;
        assert!((frac - 0.15).abs() <= 0.02, "{frac}");
    }
}
