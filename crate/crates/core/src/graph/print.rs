use std::fmt::{self, Write};

use super::{Graph, Op};

fn list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(|d| d.to_string()).collect();
    format!("[{}]", items.join(","))
}

fn attrs(g: &Graph, op: &Op) -> String {
    match op {
        Op::Const(c) => {
            let k = &g.constants[*c];
            let mut s = if k.value.rank() == 0 {
                format!("value={}", k.value.item())
            } else {
                format!("const=#{c}")
            };
            if k.meta.is_broadcast_scalar {
                if k.value.rank() == 0 {
                    s.push_str(", broadcast_scalar");
                } else {
                    let _ = write!(s, ", broadcast_scalar={}", k.meta.scalar_value);
                }
            }
            s
        }
        Op::ReduceSum { axes } | Op::ReduceMax { axes } => format!("axes={}", list(axes)),
        Op::Transpose { perm } => format!("perm={}", list(perm)),
        Op::Reshape { shape } | Op::Broadcast { shape } => format!("shape={}", list(shape)),
        Op::Cast { dtype } => format!("dtype={dtype}"),
        Op::Composite(c) => c.attrs(),
        _ => String::new(),
    }
}

/// One node per line: `%id: dtype[shape] = kind(args) {attrs}`.
impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<String> = self
            .inputs
            .iter()
            .map(|&i| format!("%{i}: {}", self.types[i]))
            .collect();
        writeln!(f, "graph({}) {{", ins.join(", "))?;
        for n in &self.nodes {
            let outs: Vec<String> = n
                .outputs
                .iter()
                .map(|&o| format!("%{o}: {}", self.types[o]))
                .collect();
            let args: Vec<String> = n.args.iter().map(|a| format!("%{a}")).collect();
            write!(f, "  {} = {}({})", outs.join(", "), n.op.name(), args.join(", "))?;
            let a = attrs(self, &n.op);
            if !a.is_empty() {
                write!(f, " {{{a}}}")?;
            }
            writeln!(f)?;
        }
        let outs: Vec<String> = self.outputs.iter().map(|o| format!("%{o}")).collect();
        writeln!(f, "  return ({})", outs.join(", "))?;
        f.write_str("}")
    }
}
