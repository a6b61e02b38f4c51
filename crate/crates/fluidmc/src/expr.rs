//! Rate expressions over model parameters and state densities.
//!
//! Expressions are authored in normalized (density) variables, so the same
//! tree serves the fluid drift, the tagged-agent rate matrix, and the scaled
//! simulation rates. Two evaluation forms exist: a plain tree walk, and a
//! compiled postfix program with parameters folded to constants for the
//! simulator's inner loop.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Pow,
    Min,
    Max,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Pow => "pow",
            Func::Min => "min",
            Func::Max => "max",
        }
    }
}

/// Expression tree. Density variables are stored by state index; parameter
/// references keep their name so a model can be re-evaluated under different
/// parameter values without reparsing.
#[derive(Debug, Clone, PartialEq)]
pub enum RateExpr {
    Lit(f64),
    Param(String),
    Density(usize),
    Neg(Box<RateExpr>),
    Bin(BinOp, Box<RateExpr>, Box<RateExpr>),
    Call(Func, Box<RateExpr>, Box<RateExpr>),
}

impl RateExpr {
    pub fn lit(v: f64) -> Self {
        RateExpr::Lit(v)
    }

    /// Tree-walk evaluation. `params` resolves parameter names, `x` holds
    /// densities by state index. Returns whatever the arithmetic produces,
    /// including NaN/inf; rate-level range policy lives with the caller.
    pub fn eval(&self, x: &[f64], params: &dyn Fn(&str) -> Option<f64>) -> Result<f64, EvalError> {
        Ok(match self {
            RateExpr::Lit(v) => *v,
            RateExpr::Param(name) => params(name).ok_or_else(|| EvalError::UnknownParam(name.clone()))?,
            RateExpr::Density(i) => x[*i],
            RateExpr::Neg(e) => -e.eval(x, params)?,
            RateExpr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x, params)?, b.eval(x, params)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            RateExpr::Call(f, a, b) => {
                let (a, b) = (a.eval(x, params)?, b.eval(x, params)?);
                match f {
                    Func::Pow => a.powf(b),
                    Func::Min => a.min(b),
                    Func::Max => a.max(b),
                }
            }
        })
    }

    /// All density indices referenced by the expression.
    pub fn densities(&self, out: &mut Vec<usize>) {
        match self {
            RateExpr::Lit(_) | RateExpr::Param(_) => {}
            RateExpr::Density(i) => {
                if !out.contains(i) {
                    out.push(*i);
                }
            }
            RateExpr::Neg(e) => e.densities(out),
            RateExpr::Bin(_, a, b) | RateExpr::Call(_, a, b) => {
                a.densities(out);
                b.densities(out);
            }
        }
    }

    /// Whether the expression is syntactically `x_i * rest` (in any
    /// association order) for the given state index, i.e. the density of `i`
    /// appears as a top-level product factor. Used to diagnose rates that
    /// cannot vanish when their source state empties.
    pub fn has_density_factor(&self, i: usize) -> bool {
        match self {
            RateExpr::Density(j) => *j == i,
            RateExpr::Bin(BinOp::Mul, a, b) => a.has_density_factor(i) || b.has_density_factor(i),
            RateExpr::Bin(BinOp::Div, a, _) => a.has_density_factor(i),
            RateExpr::Neg(e) => e.has_density_factor(i),
            _ => false,
        }
    }

    /// Substitutes parameter values and folds constant subtrees.
    pub fn fold(&self, params: &dyn Fn(&str) -> Option<f64>) -> Result<RateExpr, EvalError> {
        Ok(match self {
            RateExpr::Lit(v) => RateExpr::Lit(*v),
            RateExpr::Param(name) => {
                RateExpr::Lit(params(name).ok_or_else(|| EvalError::UnknownParam(name.clone()))?)
            }
            RateExpr::Density(i) => RateExpr::Density(*i),
            RateExpr::Neg(e) => match e.fold(params)? {
                RateExpr::Lit(v) => RateExpr::Lit(-v),
                e => RateExpr::Neg(Box::new(e)),
            },
            RateExpr::Bin(op, a, b) => match (a.fold(params)?, b.fold(params)?) {
                (RateExpr::Lit(a), RateExpr::Lit(b)) => RateExpr::Lit(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }),
                (a, b) => RateExpr::Bin(*op, Box::new(a), Box::new(b)),
            },
            RateExpr::Call(f, a, b) => match (a.fold(params)?, b.fold(params)?) {
                (RateExpr::Lit(a), RateExpr::Lit(b)) => RateExpr::Lit(match f {
                    Func::Pow => a.powf(b),
                    Func::Min => a.min(b),
                    Func::Max => a.max(b),
                }),
                (a, b) => RateExpr::Call(*f, Box::new(a), Box::new(b)),
            },
        })
    }

    /// Renders the expression in DSL syntax with minimal parentheses.
    /// `state_names` maps density indices back to identifiers.
    pub fn print(&self, state_names: &[String]) -> String {
        let mut s = String::new();
        self.print_prec(state_names, 0, &mut s);
        s
    }

    fn print_prec(&self, names: &[String], min_prec: u8, out: &mut String) {
        match self {
            RateExpr::Lit(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    let _ = fmt::Write::write_fmt(out, format_args!("({:?})", v));
                } else {
                    let _ = fmt::Write::write_fmt(out, format_args!("{:?}", v));
                }
            }
            RateExpr::Param(name) => out.push_str(name),
            RateExpr::Density(i) => {
                out.push_str("x_");
                out.push_str(&names[*i]);
            }
            RateExpr::Neg(e) => {
                let parens = min_prec > 3;
                if parens {
                    out.push('(');
                }
                out.push('-');
                e.print_prec(names, 3, out);
                if parens {
                    out.push(')');
                }
            }
            RateExpr::Bin(op, a, b) => {
                let (prec, sym) = match op {
                    BinOp::Add => (1, " + "),
                    BinOp::Sub => (1, " - "),
                    BinOp::Mul => (2, " * "),
                    BinOp::Div => (2, " / "),
                };
                let parens = min_prec > prec;
                if parens {
                    out.push('(');
                }
                a.print_prec(names, prec, out);
                out.push_str(sym);
                b.print_prec(names, prec + 1, out);
                if parens {
                    out.push(')');
                }
            }
            RateExpr::Call(f, a, b) => {
                out.push_str(f.name());
                out.push('(');
                a.print_prec(names, 0, out);
                out.push_str(", ");
                b.print_prec(names, 0, out);
                out.push(')');
            }
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Push(f64),
    Load(u32),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

/// Postfix-compiled expression with parameters folded to constants.
/// Evaluation is allocation-free given a scratch stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    code: Vec<Instr>,
    stack_need: usize,
}

impl Program {
    pub fn compile(e: &RateExpr, params: &dyn Fn(&str) -> Option<f64>) -> Result<Program, EvalError> {
        let folded = e.fold(params)?;
        let mut code = Vec::new();
        emit(&folded, &mut code);
        let mut depth = 0usize;
        let mut need = 0usize;
        for instr in &code {
            match instr {
                Instr::Push(_) | Instr::Load(_) => depth += 1,
                Instr::Neg => {}
                _ => depth -= 1,
            }
            need = need.max(depth);
        }
        Ok(Program { code, stack_need: need })
    }

    pub fn stack_need(&self) -> usize {
        self.stack_need
    }

    /// `stack` must hold at least `stack_need` slots; contents are overwritten.
    #[inline]
    pub fn eval(&self, x: &[f64], stack: &mut [f64]) -> f64 {
        let mut top = 0usize;
        for instr in &self.code {
            match *instr {
                Instr::Push(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Instr::Load(i) => {
                    stack[top] = x[i as usize];
                    top += 1;
                }
                Instr::Neg => stack[top - 1] = -stack[top - 1],
                Instr::Add => {
                    top -= 1;
                    stack[top - 1] += stack[top];
                }
                Instr::Sub => {
                    top -= 1;
                    stack[top - 1] -= stack[top];
                }
                Instr::Mul => {
                    top -= 1;
                    stack[top - 1] *= stack[top];
                }
                Instr::Div => {
                    top -= 1;
                    stack[top - 1] /= stack[top];
                }
                Instr::Pow => {
                    top -= 1;
                    stack[top - 1] = stack[top - 1].powf(stack[top]);
                }
                Instr::Min => {
                    top -= 1;
                    stack[top - 1] = stack[top - 1].min(stack[top]);
                }
                Instr::Max => {
                    top -= 1;
                    stack[top - 1] = stack[top - 1].max(stack[top]);
                }
            }
        }
        stack[0]
    }
}

fn emit(e: &RateExpr, code: &mut Vec<Instr>) {
    match e {
        RateExpr::Lit(v) => code.push(Instr::Push(*v)),
        RateExpr::Param(_) => unreachable!("parameters folded before emission"),
        RateExpr::Density(i) => code.push(Instr::Load(*i as u32)),
        RateExpr::Neg(a) => {
            emit(a, code);
            code.push(Instr::Neg);
        }
        RateExpr::Bin(op, a, b) => {
            emit(a, code);
            emit(b, code);
            code.push(match op {
                BinOp::Add => Instr::Add,
                BinOp::Sub => Instr::Sub,
                BinOp::Mul => Instr::Mul,
                BinOp::Div => Instr::Div,
            });
        }
        RateExpr::Call(f, a, b) => {
            emit(a, code);
            emit(b, code);
            code.push(match f {
                Func::Pow => Instr::Pow,
                Func::Min => Instr::Min,
                Func::Max => Instr::Max,
            });
        }
    }
}
