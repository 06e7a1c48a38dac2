use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{RunningStats, Tape, Tensor, Var};

use super::{ModelConfig, Readout};

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self {
            vars,
            index: params.index.clone(),
        }
    }

    /// Wraps vars already recorded on a tape, in parameter-set order.
    pub fn from_vars(params: &ParamSet, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.len(), "one var per parameter");
        Self {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Vars in parameter-set order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Learnable parameters plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub running: BTreeMap<String, RunningStats>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl ModelState {
    /// Fan-in scaled uniform weights, zero biases, zero GIN epsilon, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let (n, d, c, k) = (config.n_nodes, config.hidden_dim, config.n_classes, config.n_layers);
        let mut p = ParamSet::new();
        let mut running = BTreeMap::new();
        let linear = |p: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
            p.insert(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], fan_in));
            if bias {
                p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
            }
        };
        let norm = |p: &mut ParamSet, name: &str, width: usize| {
            p.insert(format!("{name}.gamma"), Tensor::filled(&[width], 1.0));
            p.insert(format!("{name}.beta"), Tensor::zeros(&[width]));
        };

        // Node features x_v = W [e_v || eta]: one-hot block and timestamp block of W.
        p.insert("node.w_onehot", uniform(rng, &[n, d], n + d));
        p.insert("node.w_time", uniform(rng, &[d, d], n + d));
        p.insert("gru.w_input", uniform(rng, &[n, 3 * d], d));
        p.insert("gru.w_hidden", uniform(rng, &[d, 3 * d], d));
        p.insert("gru.b_input", Tensor::zeros(&[3 * d]));
        p.insert("gru.b_hidden", Tensor::zeros(&[3 * d]));

        for layer in 0..k {
            let g = format!("gin.{layer}");
            p.insert(format!("{g}.eps"), Tensor::zeros(&[1]));
            linear(&mut p, rng, &format!("{g}.lin1"), d, d, true);
            norm(&mut p, &format!("{g}.bn1"), d);
            running.insert(format!("{g}.bn1"), RunningStats::new(d));
            linear(&mut p, rng, &format!("{g}.lin2"), d, d, true);
            norm(&mut p, &format!("{g}.bn2"), d);
            running.insert(format!("{g}.bn2"), RunningStats::new(d));

            let r = format!("readout.{layer}");
            match config.readout {
                Readout::Garo => {
                    linear(&mut p, rng, &format!("{r}.key"), d, d, false);
                    linear(&mut p, rng, &format!("{r}.query"), d, d, false);
                }
                Readout::Sero => {
                    linear(&mut p, rng, &format!("{r}.embed"), d, d, false);
                    norm(&mut p, &format!("{r}.bn"), d);
                    running.insert(format!("{r}.bn"), RunningStats::new(d));
                    linear(&mut p, rng, &format!("{r}.attend"), d, n, false);
                }
                Readout::Mean => {}
            }

            let t = format!("temporal.{layer}");
            for proj in ["q", "k", "v", "o", "ff1", "ff2"] {
                linear(&mut p, rng, &format!("{t}.{proj}"), d, d, true);
            }
            norm(&mut p, &format!("{t}.ln1"), d);
            norm(&mut p, &format!("{t}.ln2"), d);
        }
        linear(&mut p, rng, "head", k * d, c, true);

        Self {
            config,
            params: p,
            running,
        }
    }
}
