//! Sequence-length lists for `--n`.

fn parse_one(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let value = match s.split_once('^') {
        Some((base, exp)) => {
            let base: usize = base.trim().parse().map_err(|_| format!("bad base in `{s}`"))?;
            let exp: u32 = exp.trim().parse().map_err(|_| format!("bad exponent in `{s}`"))?;
            base.checked_pow(exp).ok_or_else(|| format!("`{s}` overflows"))?
        }
        None => s.parse().map_err(|_| format!("`{s}` is not a sequence length"))?,
    };
    if value == 0 {
        return Err("sequence lengths must be at least 1".into());
    }
    Ok(value)
}

/// `a..b` doubles from `a` while the value stays at most `b`.
fn parse_range(lo: &str, hi: &str) -> Result<Vec<usize>, String> {
    let (lo, hi) = (parse_one(lo)?, parse_one(hi)?);
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    let mut out = vec![lo];
    while let Some(next) = out.last().unwrap().checked_mul(2).filter(|&x| x <= hi) {
        out.push(next);
    }
    Ok(out)
}

/// Parsed `--n` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sizes(pub Vec<usize>);

pub fn parse_sizes(s: &str) -> Result<Sizes, String> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        match part.split_once("..") {
            Some((lo, hi)) => out.extend(parse_range(lo, hi)?),
            None => out.push(parse_one(part)?),
        }
    }
    if out.is_empty() {
        return Err("no sequence lengths given".into());
    }
    Ok(Sizes(out))
}
