//! Execution of the fixed preprocessor op set.

use crate::features::{FeatureValue, Features};
use crate::prf::{prf_fold, CounterStream};
use crate::task::Op;
use crate::vocab::{Vocabulary, EOS_ID, UNK_ID};

/// Apply one op in place. `seed` feeds the counter stream of stochastic ops.
pub fn apply_op(
    op: &Op,
    features: &mut Features,
    seed: u64,
    vocab_lookup: impl Fn(&str) -> Option<Vocabulary>,
) -> Result<(), String> {
    match op {
        Op::Tokenize { vocab, features: names } => {
            let vocab = vocab_lookup(vocab).ok_or_else(|| format!("unknown vocabulary `{vocab}`"))?;
            for name in names {
                let value = get_mut(features, name)?;
                let FeatureValue::Bytes(text) = value else {
                    return Err(format!("tokenize: `{name}` is {}, expected bytes", value.dtype()));
                };
                let ids = vocab.encode(text).map_err(|e| e.to_string())?;
                *value = FeatureValue::Int32(ids);
            }
        }
        Op::AppendEos { features: names } => {
            for name in names {
                match get_mut(features, name)? {
                    FeatureValue::Int32(v) => v.push(EOS_ID),
                    FeatureValue::Int64(v) => v.push(EOS_ID as i64),
                    other => return Err(format!("append_eos: `{name}` is {}", other.dtype())),
                }
            }
        }
        Op::Lowercase { features: names } => {
            for name in names {
                let value = get_mut(features, name)?;
                let FeatureValue::Bytes(text) = value else {
                    return Err(format!("lowercase: `{name}` is {}, expected bytes", value.dtype()));
                };
                match std::str::from_utf8(text) {
                    Ok(s) => *text = s.to_lowercase().into_bytes(),
                    Err(_) => text.make_ascii_lowercase(),
                }
            }
        }
        Op::RandomSpanMask { feature, rate } => {
            let mut stream = CounterStream::new(seed);
            match get_mut(features, feature)? {
                FeatureValue::Int32(v) => *v = span_mask(v, *rate, &mut stream, UNK_ID),
                FeatureValue::Int64(v) => *v = span_mask(v, *rate, &mut stream, UNK_ID as i64),
                other => return Err(format!("random_span_mask: `{feature}` is {}", other.dtype())),
            }
        }
    }
    Ok(())
}

fn get_mut<'a>(features: &'a mut Features, name: &str) -> Result<&'a mut FeatureValue, String> {
    features.get_mut(name).ok_or_else(|| format!("feature `{name}` not present"))
}

fn span_mask<T: Copy>(tokens: &[T], rate: f64, stream: &mut CounterStream, mask: T) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut in_span = false;
    for &t in tokens {
        if stream.next_f64() < rate {
            if !in_span {
                out.push(mask);
            }
            in_span = true;
        } else {
            out.push(t);
            in_span = false;
        }
    }
    out
}

/// Seed for a runtime-stage op: keyed by the stream seed, the example's
/// cache index, the epoch and the op position.
pub fn runtime_seed(seed: u64, cache_index: u64, epoch: u64, op_index: usize) -> u64 {
    prf_fold(seed, &[cache_index, epoch, op_index as u64])
}
