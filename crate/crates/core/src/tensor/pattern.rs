//! A small einops-style `rearrange` pattern language: named axes, optional
//! parenthesised groups, pure reshape + permute (no reductions, no repeats).
//!
//! `"b t c h w -> (b t) c h w"` merges two axes; the inverse
//! `"(b t) c h w -> b t c h w"` needs one of `b`/`t` supplied as a size.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RearrangePattern {
    source: String,
    lhs: Vec<Vec<String>>,
    rhs: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RearrangePlan {
    /// Input viewed with every elementary axis split out.
    pub split_shape: Vec<usize>,
    /// Permutation of `split_shape` into rhs elementary order.
    pub perm: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl RearrangePattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let err = |reason: &str| Error::Pattern {
            pattern: pattern.to_string(),
            reason: reason.to_string(),
        };
        let (l, r) = pattern.split_once("->").ok_or_else(|| err("missing `->`"))?;
        let lhs = parse_side(l).map_err(|e| err(&e))?;
        let rhs = parse_side(r).map_err(|e| err(&e))?;
        let mut ln: Vec<&String> = lhs.iter().flatten().collect();
        let mut rn: Vec<&String> = rhs.iter().flatten().collect();
        ln.sort();
        rn.sort();
        if ln.windows(2).any(|w| w[0] == w[1]) || rn.windows(2).any(|w| w[0] == w[1]) {
            return Err(err("axis repeated on one side"));
        }
        if ln != rn {
            return Err(err("both sides must name the same axes"));
        }
        Ok(Self {
            source: pattern.to_string(),
            lhs,
            rhs,
        })
    }

    /// The pattern with sides swapped.
    pub fn inverse(&self) -> Self {
        Self {
            source: format!("inverse of {}", self.source),
            lhs: self.rhs.clone(),
            rhs: self.lhs.clone(),
        }
    }

    pub fn plan(&self, shape: &[usize], sizes: &[(&str, usize)]) -> Result<RearrangePlan> {
        let err = |reason: String| Error::Pattern {
            pattern: self.source.clone(),
            reason,
        };
        if self.lhs.len() != shape.len() {
            return Err(err(format!(
                "pattern has {} input axes, tensor shape is {shape:?}",
                self.lhs.len()
            )));
        }
        let lookup = |name: &str| sizes.iter().find(|(n, _)| *n == name).map(|&(_, s)| s);
        let mut names = Vec::new();
        let mut split_shape = Vec::new();
        for (group, &dim) in self.lhs.iter().zip(shape) {
            let known: Vec<Option<usize>> = group.iter().map(|n| lookup(n)).collect();
            let unknown = known.iter().filter(|k| k.is_none()).count();
            let known_prod: usize = known.iter().flatten().product();
            let resolved: Vec<usize> = match unknown {
                0 => known.iter().map(|k| k.unwrap()).collect(),
                1 => {
                    if known_prod == 0 || dim % known_prod != 0 {
                        return Err(err(format!("cannot split {dim} by {known_prod}")));
                    }
                    known.iter().map(|k| k.unwrap_or(dim / known_prod)).collect()
                }
                _ => {
                    return Err(err(format!(
                        "group ({}) needs sizes for all but one axis",
                        group.join(" ")
                    )))
                }
            };
            if resolved.iter().product::<usize>() != dim {
                return Err(err(format!(
                    "group ({}) sizes {resolved:?} do not multiply to {dim}",
                    group.join(" ")
                )));
            }
            names.extend(group.iter().cloned());
            split_shape.extend(resolved);
        }
        let perm: Vec<usize> = self
            .rhs
            .iter()
            .flatten()
            .map(|n| names.iter().position(|m| m == n).expect("validated in parse"))
            .collect();
        let mut out_shape = Vec::with_capacity(self.rhs.len());
        let mut cursor = 0;
        for group in &self.rhs {
            let mut prod = 1;
            for _ in group {
                prod *= split_shape[perm[cursor]];
                cursor += 1;
            }
            out_shape.push(prod);
        }
        Ok(RearrangePlan {
            split_shape,
            perm,
            out_shape,
        })
    }
}

fn parse_side(side: &str) -> std::result::Result<Vec<Vec<String>>, String> {
    let mut groups = Vec::new();
    let mut current: Option<Vec<String>> = None;
    let spaced = side.replace('(', " ( ").replace(')', " ) ");
    for tok in spaced.split_whitespace() {
        match tok {
            "(" => {
                if current.is_some() {
                    return Err("nested parentheses".into());
                }
                current = Some(Vec::new());
            }
            ")" => match current.take() {
                Some(g) if !g.is_empty() => groups.push(g),
                Some(_) => return Err("empty group".into()),
                None => return Err("unbalanced `)`".into()),
            },
            name => {
                if !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    return Err(format!("invalid axis name `{name}`"));
                }
                match current.as_mut() {
                    Some(g) => g.push(name.to_string()),
                    None => groups.push(vec![name.to_string()]),
                }
            }
        }
    }
    if current.is_some() {
        return Err("unbalanced `(`".into());
    }
    if groups.is_empty() {
        return Err("empty side".into());
    }
    Ok(groups)
}
