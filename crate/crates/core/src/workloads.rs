//! Built-in computation graphs.

use serde::{Deserialize, Serialize};

use crate::dag::{ComputeDag, ComputeNode};
use crate::error::{Error, Result};
use crate::expr::{Affine, BinOp, Expr, ReduceOp, UnaryOp};

/// A parameterized workload constructor, as written in configuration files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    Matmul {
        n: u64,
        m: u64,
        k: u64,
    },
    MatmulBiasRelu {
        n: u64,
        m: u64,
        k: u64,
    },
    Conv2dRelu {
        batch: u64,
        h: u64,
        w: u64,
        ci: u64,
        co: u64,
        kernel: u64,
        stride: u64,
        pad: u64,
    },
    Norm2 {
        n: u64,
        m: u64,
    },
    ElementwiseChain {
        n: u64,
    },
    GroupedConv {
        batch: u64,
        h: u64,
        w: u64,
        groups: u64,
        ci: u64,
        co: u64,
        kernel: u64,
    },
}

impl Workload {
    pub fn kind(&self) -> &'static str {
        match self {
            Workload::Matmul { .. } => "matmul",
            Workload::MatmulBiasRelu { .. } => "matmul_bias_relu",
            Workload::Conv2dRelu { .. } => "conv2d_relu",
            Workload::Norm2 { .. } => "norm2",
            Workload::ElementwiseChain { .. } => "elementwise_chain",
            Workload::GroupedConv { .. } => "grouped_conv",
        }
    }

    pub fn params(&self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_object().cloned())
            .map(|o| {
                o.iter()
                    .filter(|(k, _)| *k != "kind")
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .unwrap_or_default()
    }

    /// Rejects parameters the constructors cannot turn into a graph.
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.kind())));
        let dims: Vec<u64> = match *self {
            Workload::Matmul { n, m, k } | Workload::MatmulBiasRelu { n, m, k } => vec![n, m, k],
            Workload::Norm2 { n, m } => vec![n, m],
            Workload::ElementwiseChain { n } => vec![n],
            Workload::Conv2dRelu {
                batch,
                h,
                w,
                ci,
                co,
                kernel,
                stride,
                pad,
            } => {
                if kernel > h.min(w) + 2 * pad {
                    return bad("kernel larger than the padded input");
                }
                vec![batch, h, w, ci, co, kernel, stride]
            }
            Workload::GroupedConv {
                batch,
                h,
                w,
                groups,
                ci,
                co,
                kernel,
            } => {
                if groups == 0 || ci % groups != 0 || co % groups != 0 {
                    return bad("groups must divide both channel counts");
                }
                if kernel > h.min(w) {
                    return bad("kernel larger than the input");
                }
                vec![batch, h, w, groups, ci, co, kernel]
            }
        };
        if dims.contains(&0) {
            return bad("every size must be positive");
        }
        Ok(())
    }

    pub fn build(&self) -> ComputeDag {
        match *self {
            Workload::Matmul { n, m, k } => matmul(n, m, k),
            Workload::MatmulBiasRelu { n, m, k } => matmul_bias_relu(n, m, k),
            Workload::Conv2dRelu {
                batch,
                h,
                w,
                ci,
                co,
                kernel,
                stride,
                pad,
            } => conv2d_relu(batch, h, w, ci, co, kernel, stride, pad),
            Workload::Norm2 { n, m } => norm2(n, m),
            Workload::ElementwiseChain { n } => elementwise_chain(n),
            Workload::GroupedConv {
                batch,
                h,
                w,
                groups,
                ci,
                co,
                kernel,
            } => grouped_conv(batch, h, w, groups, ci, co, kernel),
        }
    }

    /// Representative sizes, sorted by kind.
    pub fn registry() -> Vec<Workload> {
        let mut v = vec![
            Workload::Conv2dRelu {
                batch: 1,
                h: 14,
                w: 14,
                ci: 64,
                co: 64,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Workload::ElementwiseChain { n: 4096 },
            Workload::GroupedConv {
                batch: 1,
                h: 14,
                w: 14,
                groups: 4,
                ci: 64,
                co: 64,
                kernel: 3,
            },
            Workload::Matmul { n: 256, m: 256, k: 256 },
            Workload::MatmulBiasRelu { n: 128, m: 128, k: 128 },
            Workload::Norm2 { n: 256, m: 256 },
        ];
        v.sort_by(|a, b| a.kind().cmp(b.kind()));
        v
    }

    /// The same kinds at sizes small enough to interpret thousands of times.
    pub fn small_registry() -> Vec<Workload> {
        vec![
            Workload::Conv2dRelu {
                batch: 1,
                h: 6,
                w: 6,
                ci: 4,
                co: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Workload::ElementwiseChain { n: 64 },
            Workload::GroupedConv {
                batch: 1,
                h: 6,
                w: 6,
                groups: 2,
                ci: 4,
                co: 4,
                kernel: 3,
            },
            Workload::Matmul { n: 16, m: 16, k: 16 },
            Workload::MatmulBiasRelu { n: 16, m: 8, k: 12 },
            Workload::Norm2 { n: 16, m: 32 },
        ]
    }
}

fn ok(dag: crate::Result<ComputeDag>) -> ComputeDag {
    dag.expect("built-in workload is well formed")
}

fn mm_body(a: &str, b: &str) -> Expr {
    Expr::reduce(
        ReduceOp::Sum,
        &["k"],
        Expr::read_vars(a, &["i", "k"]) * Expr::read_vars(b, &["k", "j"]),
    )
}

/// `C(i,j) = Σ_k A[i,k]·B[k,j]`, with `B` a constant (weight) tensor.
pub fn matmul(n: u64, m: u64, k: u64) -> ComputeDag {
    ok(ComputeDag::new(
        &format!("matmul_{n}x{m}x{k}"),
        vec![
            ComputeNode::placeholder("A", &[n, k]),
            ComputeNode::constant("B", &[k, m]),
            ComputeNode::compute("C", &[("i", n), ("j", m)], &[("k", k)], mm_body("A", "B")),
        ],
        &["C"],
    ))
}

pub fn matmul_bias_relu(n: u64, m: u64, k: u64) -> ComputeDag {
    ok(ComputeDag::new(
        &format!("matmul_bias_relu_{n}x{m}x{k}"),
        vec![
            ComputeNode::placeholder("A", &[n, k]),
            ComputeNode::constant("B", &[k, m]),
            ComputeNode::constant("bias", &[m]),
            ComputeNode::compute("C", &[("i", n), ("j", m)], &[("k", k)], mm_body("A", "B")),
            ComputeNode::compute(
                "D",
                &[("i", n), ("j", m)],
                &[],
                Expr::read_vars("C", &["i", "j"]) + Expr::read_vars("bias", &["j"]),
            ),
            ComputeNode::compute(
                "R",
                &[("i", n), ("j", m)],
                &[],
                Expr::relu(Expr::read_vars("D", &["i", "j"])),
            ),
        ],
        &["R"],
    ))
}

fn all(conds: Vec<Expr>) -> Expr {
    conds
        .into_iter()
        .reduce(|a, b| Expr::binary(BinOp::Mul, a, b))
        .unwrap_or(Expr::constant(1.0))
}

/// NHWC convolution followed by ReLU; a zero-padding node is added when
/// `pad > 0`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_relu(batch: u64, h: u64, w: u64, ci: u64, co: u64, kernel: u64, stride: u64, pad: u64) -> ComputeDag {
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut nodes = vec![
        ComputeNode::placeholder("X", &[batch, h, w, ci]),
        ComputeNode::constant("W", &[kernel, kernel, ci, co]),
    ];
    let src = if pad > 0 {
        let p = pad as i64;
        let inside = all(vec![
            Expr::binary(BinOp::Ge, Expr::iter("h"), Expr::constant(p as f64)),
            Expr::binary(BinOp::Lt, Expr::iter("h"), Expr::constant((h as i64 + p) as f64)),
            Expr::binary(BinOp::Ge, Expr::iter("w"), Expr::constant(p as f64)),
            Expr::binary(BinOp::Lt, Expr::iter("w"), Expr::constant((w as i64 + p) as f64)),
        ]);
        let read = Expr::read(
            "X",
            vec![
                Affine::var("n"),
                Affine::var("h").offset(-p),
                Affine::var("w").offset(-p),
                Affine::var("c"),
            ],
        );
        nodes.push(ComputeNode::compute(
            "P",
            &[("n", batch), ("h", h + 2 * pad), ("w", w + 2 * pad), ("c", ci)],
            &[],
            Expr::select(inside, read, Expr::constant(0.0)),
        ));
        "P"
    } else {
        "X"
    };
    let s = stride as i64;
    let body = Expr::reduce(
        ReduceOp::Sum,
        &["rh", "rw", "rc"],
        Expr::read(
            src,
            vec![
                Affine::var("n"),
                Affine::term("h", s).plus(&Affine::var("rh")),
                Affine::term("w", s).plus(&Affine::var("rw")),
                Affine::var("rc"),
            ],
        ) * Expr::read_vars("W", &["rh", "rw", "rc", "f"]),
    );
    let space = [("n", batch), ("h", oh), ("w", ow), ("f", co)];
    nodes.push(ComputeNode::compute(
        "C",
        &space,
        &[("rh", kernel), ("rw", kernel), ("rc", ci)],
        body,
    ));
    nodes.push(ComputeNode::compute(
        "R",
        &space,
        &[],
        Expr::relu(Expr::read_vars("C", &["n", "h", "w", "f"])),
    ));
    ok(ComputeDag::new(
        &format!("conv2d_relu_{batch}x{h}x{w}x{ci}x{co}_k{kernel}s{stride}p{pad}"),
        nodes,
        &["R"],
    ))
}

/// Matrix 2-norm: a full reduction followed by a square root.
pub fn norm2(n: u64, m: u64) -> ComputeDag {
    let a = || Expr::read_vars("A", &["i", "j"]);
    ok(ComputeDag::new(
        &format!("norm2_{n}x{m}"),
        vec![
            ComputeNode::placeholder("A", &[n, m]),
            ComputeNode::compute(
                "S",
                &[],
                &[("i", n), ("j", m)],
                Expr::reduce(ReduceOp::Sum, &["i", "j"], a() * a()),
            ),
            ComputeNode::compute("T", &[], &[], Expr::unary(UnaryOp::Sqrt, Expr::read("S", vec![]))),
        ],
        &["T"],
    ))
}

pub fn elementwise_chain(n: u64) -> ComputeDag {
    ok(ComputeDag::new(
        &format!("elementwise_chain_{n}"),
        vec![
            ComputeNode::placeholder("A", &[n]),
            ComputeNode::compute(
                "B",
                &[("i", n)],
                &[],
                Expr::read_vars("A", &["i"]) * Expr::constant(2.0),
            ),
            ComputeNode::compute(
                "C",
                &[("i", n)],
                &[],
                Expr::read_vars("B", &["i"]) + Expr::constant(1.0),
            ),
            ComputeNode::compute("D", &[("i", n)], &[], Expr::relu(Expr::read_vars("C", &["i"]))),
        ],
        &["D"],
    ))
}

/// Grouped convolution without padding, output `[n, h, w, g, f]`.
pub fn grouped_conv(batch: u64, h: u64, w: u64, groups: u64, ci: u64, co: u64, kernel: u64) -> ComputeDag {
    let cig = ci / groups;
    let cog = co / groups;
    let oh = h - kernel + 1;
    let ow = w - kernel + 1;
    let body = Expr::reduce(
        ReduceOp::Sum,
        &["rh", "rw", "rc"],
        Expr::read(
            "X",
            vec![
                Affine::var("n"),
                Affine::var("h").plus(&Affine::var("rh")),
                Affine::var("w").plus(&Affine::var("rw")),
                Affine::term("g", cig as i64).plus(&Affine::var("rc")),
            ],
        ) * Expr::read_vars("W", &["g", "rh", "rw", "rc", "f"]),
    );
    ok(ComputeDag::new(
        &format!("grouped_conv_{batch}x{h}x{w}x{ci}x{co}_g{groups}k{kernel}"),
        vec![
            ComputeNode::placeholder("X", &[batch, h, w, ci]),
            ComputeNode::constant("W", &[groups, kernel, kernel, cig, cog]),
            ComputeNode::compute(
                "Y",
                &[("n", batch), ("h", oh), ("w", ow), ("g", groups), ("f", cog)],
                &[("rh", kernel), ("rw", kernel), ("rc", cig)],
                body,
            ),
        ],
        &["Y"],
    ))
}

/// Two inputs, a matmul `C` and an element-wise consumer `D`.
pub fn example_fused(n: u64) -> ComputeDag {
    ok(ComputeDag::new(
        "example_fused",
        vec![
            ComputeNode::placeholder("A", &[n, n]),
            ComputeNode::placeholder("B", &[n, n]),
            ComputeNode::compute("C", &[("i", n), ("j", n)], &[("k", n)], mm_body("A", "B")),
            ComputeNode::compute(
                "D",
                &[("i", n), ("j", n)],
                &[],
                Expr::relu(Expr::read_vars("C", &["i", "j"])),
            ),
        ],
        &["D"],
    ))
}

/// An element-wise `B`, a transpose `C`, a flipped copy `D` and a small
/// output matmul `E = C·D` with a long reduction.
pub fn example_reduction(k: u64) -> ComputeDag {
    ok(ComputeDag::new(
        "example_reduction",
        vec![
            ComputeNode::placeholder("A", &[k, 2]),
            ComputeNode::compute(
                "B",
                &[("k", k), ("i", 2)],
                &[],
                Expr::relu(Expr::read_vars("A", &["k", "i"])),
            ),
            ComputeNode::compute("C", &[("i", 2), ("k", k)], &[], Expr::read_vars("B", &["k", "i"])),
            ComputeNode::compute(
                "D",
                &[("k", k), ("j", 2)],
                &[],
                Expr::read("B", vec![Affine::var("k"), Affine::term("j", -1).offset(1)]),
            ),
            ComputeNode::compute(
                "E",
                &[("i", 2), ("j", 2)],
                &[("k", k)],
                Expr::reduce(
                    ReduceOp::Sum,
                    &["k"],
                    Expr::read_vars("C", &["i", "k"]) * Expr::read_vars("D", &["k", "j"]),
                ),
            ),
        ],
        &["E"],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_builds_and_is_sorted() {
        let r = Workload::registry();
        assert!(!r.is_empty());
        let kinds: Vec<&str> = r.iter().map(|w| w.kind()).collect();
        let mut sorted = kinds.clone();
        sorted.sort();
        assert_eq!(kinds, sorted);
        for w in r.iter().chain(Workload::small_registry().iter()) {
            let d = w.build();
            assert!(d.flop_count() > 0.0, "{}", d.id);
        }
    }

    #[test]
    fn conv_output_shape() {
        let d = conv2d_relu(1, 8, 8, 3, 4, 3, 2, 1);
        assert_eq!(d.node("R").unwrap().shape(), vec![1, 4, 4, 4]);
    }

    #[test]
    fn workload_json_round_trip() {
        for w in Workload::registry() {
            let s = serde_json::to_string(&w).unwrap();
            assert_eq!(serde_json::from_str::<Workload>(&s).unwrap(), w);
        }
    }
}
