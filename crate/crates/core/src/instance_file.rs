//! Line-oriented text format for problem instances.
//!
//! ```text
//! L K N
//! s[0] s[1] ... s[L-1]
//! h_0[0] ... h_0[K-1]
//! ...
//! h_{N-1}[0] ... h_{N-1}[K-1]
//! NOISE <snr_db> <seed>        (optional)
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Observations are
//! never stored; they are recomputed on load, and the optional `NOISE` line
//! adds noise at the given SNR drawn from a generator seeded with `seed`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experiments::add_noise;
use crate::fourier::ShortFilter;
use crate::model::{make_instance, ProblemDims, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBlock {
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFile {
    pub dims: ProblemDims,
    pub signal: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
    pub noise: Option<NoiseBlock>,
}

impl InstanceFile {
    /// Ground truth of `inst`; any noise already in its observations is not
    /// representable and is dropped.
    pub fn from_instance(inst: &ProblemInstance, noise: Option<NoiseBlock>) -> Self {
        Self {
            dims: inst.dims(),
            signal: inst.signal().to_vec(),
            channels: inst.channels().iter().map(|h| h.coeffs().to_vec()).collect(),
            noise,
        }
    }

    /// Builds the instance, injecting noise when a `NOISE` line was given.
    pub fn load(&self) -> Result<ProblemInstance> {
        let l = self.dims.signal_len;
        let channels = self
            .channels
            .iter()
            .map(|c| ShortFilter::new(c.clone(), l))
            .collect::<Result<Vec<_>>>()?;
        let inst = make_instance(self.dims, self.signal.clone(), channels)?;
        match self.noise {
            Some(NoiseBlock { snr_db, seed }) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                add_noise(inst, snr_db, &mut rng)
            }
            None => Ok(inst),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_values<T: FromStr>(line: usize, text: &str, what: &str) -> Result<Vec<T>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| parse_err(line, format!("cannot parse '{tok}' in {what}")))
        })
        .collect()
}

fn parse_reals(line: usize, text: &str, what: &str, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = parse_values(line, text, what)?;
    if values.len() != expected {
        return Err(parse_err(
            line,
            format!("{what}: expected {expected} values, found {}", values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(line, format!("{what}: non-finite value")));
    }
    Ok(values)
}

impl FromStr for InstanceFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (line, header) = lines.next().ok_or_else(|| parse_err(1, "empty instance file"))?;
        let sizes: Vec<usize> = parse_values(line, header, "header")?;
        let [l, k, n] = sizes[..] else {
            return Err(parse_err(line, "header must be 'L K N'"));
        };
        let dims = ProblemDims::new(l, k, n).map_err(|e| parse_err(line, e.to_string()))?;

        let (line, text) = lines
            .next()
            .ok_or_else(|| parse_err(line + 1, "missing signal line"))?;
        let signal = parse_reals(line, text, "signal", l)?;
        let mut last = line;

        let mut channels = Vec::with_capacity(n);
        for c in 0..n {
            let (line, text) = lines
                .next()
                .ok_or_else(|| parse_err(last + 1, format!("missing line for channel {c}")))?;
            channels.push(parse_reals(line, text, &format!("channel {c}"), k)?);
            last = line;
        }

        let noise = match lines.next() {
            None => None,
            Some((line, text)) => {
                let mut parts = text.split_whitespace();
                if parts.next() != Some("NOISE") {
                    return Err(parse_err(line, "unexpected content after the last channel"));
                }
                let rest: Vec<&str> = parts.collect();
                let [snr, seed] = rest[..] else {
                    return Err(parse_err(line, "NOISE line must be 'NOISE <snr_db> <seed>'"));
                };
                let snr_db: f64 = snr
                    .parse()
                    .map_err(|_| parse_err(line, format!("cannot parse SNR '{snr}'")))?;
                if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
                    return Err(parse_err(line, "SNR must be a number or inf"));
                }
                let seed = seed
                    .parse()
                    .map_err(|_| parse_err(line, format!("cannot parse seed '{seed}'")))?;
                if let Some((line, _)) = lines.next() {
                    return Err(parse_err(line, "unexpected content after the NOISE line"));
                }
                Some(NoiseBlock { snr_db, seed })
            }
        };

        Ok(Self {
            dims,
            signal,
            channels,
            noise,
        })
    }
}

fn write_row(f: &mut fmt::Formatter<'_>, values: &[f64]) -> fmt::Result {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            f.write_str(" ")?;
        }
        // `{}` on f64 prints the shortest string that parses back exactly.
        write!(f, "{v}")?;
    }
    writeln!(f)
}

impl fmt::Display for InstanceFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.dims;
        writeln!(f, "{} {} {}", d.signal_len, d.filter_len, d.num_channels)?;
        write_row(f, &self.signal)?;
        for c in &self.channels {
            write_row(f, c)?;
        }
        if let Some(NoiseBlock { snr_db, seed }) = self.noise {
            writeln!(f, "NOISE {snr_db} {seed}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::sample_instance;
    use proptest::prelude::*;

    const SMALL: &str = "4 2 1\n1 2 3 4\n1 1\n";

    #[test]
    fn parses_and_recomputes_observations() {
        let file: InstanceFile = SMALL.parse().unwrap();
        assert_eq!(file.noise, None);
        let inst = file.load().unwrap();
        assert_eq!(inst.observations()[0], vec![5.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn skips_blank_and_comment_lines() {
        let text = "# generated\n\n4 2 1\n1 2 3 4\n\n1 1\n";
        let file: InstanceFile = text.parse().unwrap();
        assert_eq!(file.signal, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn noise_line_is_applied_deterministically() {
        let text = format!("{SMALL}NOISE 40 9\n");
        let file: InstanceFile = text.parse().unwrap();
        assert_eq!(file.noise, Some(NoiseBlock { snr_db: 40.0, seed: 9 }));
        let a = file.load().unwrap();
        let b = file.load().unwrap();
        assert_eq!(a.observations(), b.observations());
        let clean = [5.0, 3.0, 5.0, 7.0];
        let noise: f64 = a.observations()[0]
            .iter()
            .zip(clean)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let y_norm = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((noise / y_norm - 0.01).abs() < 1e-12);
    }

    fn line_of(text: &str) -> usize {
        match text.parse::<InstanceFile>() {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(""), 1);
        assert_eq!(line_of("4 2\n"), 1);
        assert_eq!(line_of("4 5 1\n1 2 3 4\n1 1 1 1 1\n"), 1);
        assert_eq!(line_of("4 2 1\n1 2 3\n1 1\n"), 2);
        assert_eq!(line_of("4 2 1\n1 2 x 4\n1 1\n"), 2);
        assert_eq!(line_of("4 2 2\n1 2 3 4\n1 1\n"), 4);
        assert_eq!(line_of("4 2 1\n1 2 3 4\n1 NaN\n"), 3);
        assert_eq!(line_of("4 2 1\n1 2 3 4\n1 1\nextra\n"), 4);
        assert_eq!(line_of("4 2 1\n1 2 3 4\n1 1\nNOISE 40\n"), 4);
        assert_eq!(line_of("4 2 1\n1 2 3 4\n1 1\nNOISE 40 1\n1\n"), 5);
    }

    #[test]
    fn zero_channel_is_a_load_error_not_a_parse_error() {
        let file: InstanceFile = "4 2 1\n0 0 0 0\n1 1\nNOISE 20 1\n".parse().unwrap();
        assert_eq!(file.load(), Err(Error::DegenerateObservation { channel: 0 }));
    }

    proptest! {
        #[test]
        fn round_trips_exactly(seed in any::<u64>(), l in 2usize..12, n in 1usize..4, snr in proptest::option::of(0.0f64..80.0)) {
            use rand::SeedableRng;
            let k = 1 + (seed as usize % l);
            let dims = ProblemDims::new(l, k, n).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = sample_instance(dims, &mut rng);
            let noise = snr.map(|snr_db| NoiseBlock { snr_db, seed });
            let file = InstanceFile::from_instance(&inst, noise);
            let back: InstanceFile = file.to_string().parse().unwrap();
            prop_assert_eq!(&back, &file);
            if noise.is_none() {
                let loaded = back.load().unwrap();
                prop_assert_eq!(loaded.observations(), inst.observations());
            }
        }
    }
}
