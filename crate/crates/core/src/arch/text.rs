//! Line-oriented text form of an [`ArchSpec`].
//!
//! ```text
//! variant=B0 res=224 nc=3 se=1
//! stage op=Conv e=1 k=3 c=32 n=1 s=2 r=224
//! stage op=MBConv e=1 k=3 c=16 n=1 s=1 r=112
//! ...
//! ```
//!
//! The header gains a trailing ` top=imagenet` for the stock classifier top.
//! Every line ends in `\n`. Head dropout rates are not part of the format and
//! come back as defaults.

use std::fmt::Write as _;

use super::{ArchSpec, HeadSpec, Operator, StageSpec, Top, Variant};
use crate::error::{Error, Result};

pub fn to_text(spec: &ArchSpec) -> String {
    let mut s = format!(
        "variant={} res={} nc={} se={}",
        spec.variant,
        spec.input_resolution,
        spec.head.num_classes,
        u8::from(spec.include_se)
    );
    if spec.top == Top::ImageNet {
        s.push_str(" top=imagenet");
    }
    s.push('\n');
    for st in &spec.stages {
        let _ = writeln!(
            s,
            "stage op={} e={} k={} c={} n={} s={} r={}",
            st.operator, st.expansion, st.kernel, st.out_channels, st.repeats, st.stride, st.resolution
        );
    }
    s
}

fn fields<'a>(line: &'a str, lineno: usize, keys: &[&str]) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != keys.len() {
        return Err(Error::ArchParse {
            line: lineno,
            msg: format!("expected {} fields, found {}", keys.len(), parts.len()),
        });
    }
    parts
        .iter()
        .zip(keys)
        .map(|(p, k)| {
            p.strip_prefix(k)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::ArchParse {
                    line: lineno,
                    msg: format!("expected `{k}=...`, found `{p}`"),
                })
        })
        .collect()
}

fn num(v: &str, lineno: usize) -> Result<usize> {
    // Reject leading zeros and signs so parse∘print is the identity.
    let canonical = !v.is_empty() && v.bytes().all(|b| b.is_ascii_digit()) && (v == "0" || !v.starts_with('0'));
    if !canonical {
        return Err(Error::ArchParse {
            line: lineno,
            msg: format!("`{v}` is not a canonical unsigned integer"),
        });
    }
    v.parse().map_err(|e| Error::ArchParse {
        line: lineno,
        msg: format!("`{v}`: {e}"),
    })
}

pub fn parse_text(text: &str) -> Result<ArchSpec> {
    let body = text.strip_suffix('\n').ok_or(Error::ArchParse {
        line: 0,
        msg: "text must end with a newline".into(),
    })?;
    let mut lines = body.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines.next().ok_or(Error::ArchParse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let top = if header.split(' ').count() == 5 {
        Top::ImageNet
    } else {
        Top::Proposed
    };
    let hv = match top {
        Top::ImageNet => fields(header, ln, &["variant", "res", "nc", "se", "top"])?,
        Top::Proposed => fields(header, ln, &["variant", "res", "nc", "se"])?,
    };
    if top == Top::ImageNet && hv[4] != "imagenet" {
        return Err(Error::ArchParse {
            line: ln,
            msg: format!("unknown top `{}`", hv[4]),
        });
    }
    let variant: Variant = match hv[0] {
        "B0" | "B1" | "B2" | "B3" | "B4" | "B5" => hv[0].parse()?,
        other => return Err(Error::UnknownVariant(other.to_string())),
    };
    let include_se = match hv[3] {
        "0" => false,
        "1" => true,
        other => {
            return Err(Error::ArchParse {
                line: ln,
                msg: format!("se must be 0 or 1, found `{other}`"),
            })
        }
    };
    let mut stages = Vec::new();
    for (ln, line) in lines {
        let rest = line.strip_prefix("stage ").ok_or(Error::ArchParse {
            line: ln,
            msg: "stage lines start with `stage `".into(),
        })?;
        let v = fields(rest, ln, &["op", "e", "k", "c", "n", "s", "r"])?;
        let operator = match v[0] {
            "Conv" => Operator::Conv,
            "MBConv" => Operator::MBConv,
            other => {
                return Err(Error::ArchParse {
                    line: ln,
                    msg: format!("unknown operator `{other}`"),
                })
            }
        };
        stages.push(StageSpec {
            operator,
            expansion: num(v[1], ln)?,
            kernel: num(v[2], ln)?,
            out_channels: num(v[3], ln)?,
            repeats: num(v[4], ln)?,
            stride: num(v[5], ln)?,
            resolution: num(v[6], ln)?,
        });
    }
    let spec = ArchSpec {
        variant,
        input_resolution: num(hv[1], ln)?,
        stages,
        head: HeadSpec::new(num(hv[2], ln)?),
        top,
        include_se,
    };
    spec.validate()?;
    Ok(spec)
}
