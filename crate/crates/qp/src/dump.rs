//! Plain-text problem dump for cross-checking against external solvers.
//!
//! Format (whitespace separated, `#` comments allowed):
//!
//! ```text
//! qp 1
//! dims <n> <m_eq> <m_in>
//! Q <nnz>            # upper triangle, one "row col value" line each
//! c                  # n values, one per line
//! A_eq <nnz>
//! b_eq
//! A_in <nnz>
//! b_in
//! lb                 # "inf" / "-inf" allowed
//! ub
//! ```

use crate::problem::{QpError, QpProblem};
use crate::sparse::{CscMatrix, SymCscMatrix};

fn fmt_val(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.17e}")
    }
}

pub fn dump_qp(p: &QpProblem) -> String {
    let mut out = String::new();
    out.push_str("qp 1\n");
    out.push_str(&format!("dims {} {} {}\n", p.n, p.m_eq(), p.m_in()));
    let q_t = p.q.upper().triplets();
    out.push_str(&format!("Q {}\n", q_t.len()));
    for (r, c, v) in q_t {
        out.push_str(&format!("{r} {c} {}\n", fmt_val(v)));
    }
    out.push_str("c\n");
    for &v in &p.c {
        out.push_str(&format!("{}\n", fmt_val(v)));
    }
    for (name, mat, vec) in [("A_eq", &p.a_eq, &p.b_eq), ("A_in", &p.a_in, &p.b_in)] {
        let t = mat.triplets();
        out.push_str(&format!("{name} {}\n", t.len()));
        for (r, c, v) in t {
            out.push_str(&format!("{r} {c} {}\n", fmt_val(v)));
        }
        out.push_str(&format!("b{}\n", &name[1..]));
        for &v in vec.iter() {
            out.push_str(&format!("{}\n", fmt_val(v)));
        }
    }
    out.push_str("lb\n");
    for &v in &p.lb {
        out.push_str(&format!("{}\n", fmt_val(v)));
    }
    out.push_str("ub\n");
    for &v in &p.ub {
        out.push_str(&format!("{}\n", fmt_val(v)));
    }
    out
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str), QpError> {
        for (idx, raw) in self.iter.by_ref() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                return Ok((idx + 1, line));
            }
        }
        Err(QpError::Parse {
            line: 0,
            msg: "unexpected end of input".into(),
        })
    }
}

fn parse_val(s: &str, line: usize) -> Result<f64, QpError> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse::<f64>().map_err(|e| QpError::Parse {
            line,
            msg: format!("bad number {s:?}: {e}"),
        }),
    }
}

fn expect_header<'a>(
    lines: &mut Lines<'a>,
    name: &str,
) -> Result<(usize, Vec<&'a str>), QpError> {
    let (ln, line) = lines.next_line()?;
    let mut parts = line.split_whitespace();
    let head = parts.next().unwrap_or("");
    if head != name {
        return Err(QpError::Parse {
            line: ln,
            msg: format!("expected section {name:?}, found {head:?}"),
        });
    }
    Ok((ln, parts.collect()))
}

fn parse_usize(s: &str, line: usize) -> Result<usize, QpError> {
    s.parse::<usize>().map_err(|e| QpError::Parse {
        line,
        msg: format!("bad count {s:?}: {e}"),
    })
}

fn parse_triplets(
    lines: &mut Lines<'_>,
    nnz: usize,
) -> Result<Vec<(usize, usize, f64)>, QpError> {
    let mut t = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let (ln, line) = lines.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(QpError::Parse {
                line: ln,
                msg: format!("expected \"row col value\", found {line:?}"),
            });
        }
        t.push((
            parse_usize(parts[0], ln)?,
            parse_usize(parts[1], ln)?,
            parse_val(parts[2], ln)?,
        ));
    }
    Ok(t)
}

fn parse_vector(lines: &mut Lines<'_>, len: usize) -> Result<Vec<f64>, QpError> {
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        let (ln, line) = lines.next_line()?;
        v.push(parse_val(line, ln)?);
    }
    Ok(v)
}

pub fn parse_qp(text: &str) -> Result<QpProblem, QpError> {
    let mut lines = Lines {
        iter: text.lines().enumerate(),
    };
    let (ln, line) = lines.next_line()?;
    if line != "qp 1" {
        return Err(QpError::Parse {
            line: ln,
            msg: format!("expected \"qp 1\" header, found {line:?}"),
        });
    }
    let (ln, dims) = expect_header(&mut lines, "dims")?;
    if dims.len() != 3 {
        return Err(QpError::Parse {
            line: ln,
            msg: "dims needs three counts: n m_eq m_in".into(),
        });
    }
    let n = parse_usize(dims[0], ln)?;
    let m_eq = parse_usize(dims[1], ln)?;
    let m_in = parse_usize(dims[2], ln)?;

    let (ln, args) = expect_header(&mut lines, "Q")?;
    let nnz = parse_usize(args.first().copied().unwrap_or(""), ln)?;
    let q = SymCscMatrix::from_triplets(n, &parse_triplets(&mut lines, nnz)?);
    expect_header(&mut lines, "c")?;
    let c = parse_vector(&mut lines, n)?;

    let (ln, args) = expect_header(&mut lines, "A_eq")?;
    let nnz = parse_usize(args.first().copied().unwrap_or(""), ln)?;
    let a_eq = CscMatrix::from_triplets(m_eq, n, &parse_triplets(&mut lines, nnz)?);
    expect_header(&mut lines, "b_eq")?;
    let b_eq = parse_vector(&mut lines, m_eq)?;

    let (ln, args) = expect_header(&mut lines, "A_in")?;
    let nnz = parse_usize(args.first().copied().unwrap_or(""), ln)?;
    let a_in = CscMatrix::from_triplets(m_in, n, &parse_triplets(&mut lines, nnz)?);
    expect_header(&mut lines, "b_in")?;
    let b_in = parse_vector(&mut lines, m_in)?;

    expect_header(&mut lines, "lb")?;
    let lb = parse_vector(&mut lines, n)?;
    expect_header(&mut lines, "ub")?;
    let ub = parse_vector(&mut lines, n)?;

    let p = QpProblem {
        n,
        q,
        c,
        a_eq,
        b_eq,
        a_in,
        b_in,
        lb,
        ub,
    };
    p.validate()?;
    Ok(p)
}
