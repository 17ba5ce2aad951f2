//! Built-in program corpus: the six toy programs, the three attention programs
//! and the plated item-response program.

use std::collections::BTreeMap;

use crate::ast::Program;
use crate::text::parse_program;

pub const LATENT: &str = "\
mu1 ~ uniform(-5, 5)
sigma1 ~ uniform(0, 20)
z1 ~ gaussian(mu1, sigma1)
c1 ~ uniform(-3, 3)
z2 = z1 * c1
c2 ~ uniform(-10, 10)
z3 = z2 + c2
sigma2 ~ uniform(0.5, 10)
z4 ~ gaussian(z3, sigma2)
";

pub const CLUSTERING: &str = "\
mu1 ~ uniform(-15, 15)
sigma1 ~ uniform(0.5, 50)
g1 ~ gaussian(mu1, sigma1)
mu2 ~ uniform(-15, 15)
sigma2 ~ uniform(0.5, 50)
g2 ~ gaussian(mu2, sigma2)
t1 ~ gaussian(0, 10)
m1 = if (t1 > 0) g1 else g2
sigma3 ~ uniform(0.5, 10)
z1 ~ gaussian(m1, sigma3)
t2 ~ gaussian(0, 10)
m2 = if (t2 > 0) g1 else g2
z2 ~ gaussian(m2, sigma3)
";

pub const HIERARCHICAL: &str = "\
mu1 ~ uniform(-5, 5)
sigma1 ~ uniform(0, 50)
g ~ gaussian(mu1, sigma1)
sigma2 ~ uniform(0, 10)
t1 ~ gaussian(g, sigma2)
sigma3 ~ uniform(0, 10)
t2 ~ gaussian(g, sigma3)
sigma4 ~ uniform(0.5, 10)
z1 ~ gaussian(t1, sigma4)
sigma5 ~ uniform(0.5, 10)
z2 ~ gaussian(t2, sigma5)
";

pub const MULTI_LEVEL: &str = "\
mu1 ~ uniform(-10, 10)
sigma1 ~ uniform(0, 100)
a0 ~ gaussian(mu1, sigma1)
sigma2 ~ uniform(0, 10)
a1 ~ gaussian(a0, sigma2)
sigma3 ~ uniform(0, 10)
a2 ~ gaussian(a0, sigma3)
mu2 ~ uniform(-5, 5)
sigma4 ~ uniform(0, 10)
b ~ gaussian(mu2, sigma4)
c1 ~ uniform(-5, 5)
t1 = b * c1
t2 = a1 + t1
sigma5 ~ uniform(0.5, 10)
z1 ~ gaussian(t2, sigma5)
c2 ~ uniform(-5, 5)
t3 = b * c2
t4 = a2 + t3
sigma6 ~ uniform(0.5, 10)
z2 ~ gaussian(t4, sigma6)
";

// The published listing assigns z1 twice; the second observation is z2.
pub const MILKY_WAY: &str = "\
mu1 ~ uniform(-10, 10)
sigma1 ~ uniform(0, 30)
m0 ~ gaussian(mu1, sigma1)
c1 ~ uniform(-2, 2)
m1 = m0 * c1
sigma2 ~ uniform(0, 10)
g1 ~ gaussian(m1, sigma2)
c2 ~ uniform(-5, 5)
m2 = m0 + c2
sigma3 ~ uniform(0, 10)
g2 ~ gaussian(m2, sigma3)
sigma4 ~ uniform(0.5, 10)
z1 ~ gaussian(g1, sigma4)
sigma5 ~ uniform(0.5, 10)
z2 ~ gaussian(g2, sigma5)
";

pub const ROSENBROCK: &str = "\
mu1 ~ uniform(-8, 8)
sigma1 ~ uniform(0, 5)
z1 ~ gaussian(mu1, sigma1)
mu2 ~ uniform(-8, 8)
sigma2 ~ uniform(0, 5)
z2 ~ gaussian(mu2, sigma2)
r = rosenbrock(z1, z2)
sigma3 ~ uniform(0.5, 10)
z3 ~ gaussian(r, sigma3)
";

pub const INDEPENDENT_GAUSSIANS: &str = "\
mu1 ~ uniform(-5, 0)
sigma1 ~ uniform(0, 5)
z1 ~ gaussian(mu1, sigma1)
mu2 ~ uniform(0, 5)
sigma2 ~ uniform(0, 5)
y1 ~ gaussian(mu2, sigma2)
z2 = z1 * 2
y2 = y1 * 2
";

pub const CONDITIONAL_INDEPENDENCE: &str = "\
p ~ uniform(0, 1)
z ~ bernoulli(p)
a = if (z == 1) 1 else 10
b = if (z == 1) 3 else -3
x ~ gaussian(a, 1)
y ~ gaussian(b, 1)
";

pub const COMMON_EFFECT: &str = "\
px ~ uniform(0, 1)
py ~ uniform(0, 1)
x ~ bernoulli(px)
y ~ bernoulli(py)
z = if (x or y) 1 else 0
";

pub const IRT: &str = "\
ability ~ gaussian(0, 1)
plate(30):
  difficulty[i] ~ gaussian(0, 1)
  response[i] ~ bernoulli(sigmoid(ability + -1 * difficulty[i]))
";

fn named(name: &str, src: &str) -> Program {
    let mut p = parse_program(src).expect("built-in listing parses");
    p.name = name.to_string();
    p
}

pub fn latent() -> Program {
    named("latent", LATENT)
}

pub fn clustering() -> Program {
    named("clustering", CLUSTERING)
}

pub fn hierarchical() -> Program {
    named("hierarchical", HIERARCHICAL)
}

pub fn multi_level() -> Program {
    named("multi_level", MULTI_LEVEL)
}

pub fn milky_way() -> Program {
    named("milky_way", MILKY_WAY)
}

pub fn rosenbrock() -> Program {
    named("rosenbrock", ROSENBROCK)
}

pub fn independent_gaussians() -> Program {
    named("independent_gaussians", INDEPENDENT_GAUSSIANS)
}

pub fn conditional_independence() -> Program {
    named("conditional_independence", CONDITIONAL_INDEPENDENCE)
}

pub fn common_effect() -> Program {
    named("common_effect", COMMON_EFFECT)
}

pub fn irt() -> Program {
    named("irt", IRT)
}

/// The six toy programs used for the single-program and meta-amortized experiments.
pub fn toy_programs() -> Vec<Program> {
    vec![latent(), clustering(), hierarchical(), multi_level(), milky_way(), rosenbrock()]
}

pub fn builtin_programs() -> BTreeMap<String, Program> {
    [
        latent(),
        clustering(),
        hierarchical(),
        multi_level(),
        milky_way(),
        rosenbrock(),
        independent_gaussians(),
        conditional_independence(),
        common_effect(),
        irt(),
    ]
    .into_iter()
    .map(|p| (p.name.clone(), p))
    .collect()
}

pub fn builtin(name: &str) -> Option<Program> {
    builtin_programs().remove(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{validate, Expr, Func, Rhs, Statement};
    use crate::exec::sigmoid;

    #[test]
    fn all_builtins_validate() {
        let all = builtin_programs();
        assert_eq!(all.len(), 10);
        for (name, p) in &all {
            assert!(validate(p).is_empty(), "{name}: {:?}", validate(p));
        }
    }

    #[test]
    fn latent_shape() {
        let p = latent();
        assert_eq!(p.statements.len(), 9);
        let last = p.statements[8].as_assign().unwrap();
        assert_eq!(last.target.as_str(), "z4");
        assert_eq!(crate::text::render_statement(last, None, false), "z4 ~ gaussian(z3, sigma2)");
    }

    #[test]
    fn rosenbrock_calls_external_function() {
        let p = rosenbrock();
        let r = p.assign(&"r".into()).unwrap();
        assert_eq!(r.rhs, Rhs::Det(Expr::call(Func::Rosenbrock, vec![Expr::var("z1"), Expr::var("z2")])));
    }

    #[test]
    fn irt_has_thirty_questions() {
        let p = irt();
        let plate = p.plate().unwrap();
        assert_eq!(plate.total, 30);
        assert!(matches!(p.statements[1], Statement::Plate(_)));
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
