use crate::data::Dataset;
use crate::envs::{Action, EnvConfig};
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::models::Encoder;

/// A dataset passed once through the frozen encoder.
#[derive(Clone, Debug)]
pub struct Features {
    pub env: EnvConfig,
    pub s: Tensor,
    pub s_next: Tensor,
    pub flow: Tensor,
    pub actions: Vec<Action>,
    pub task_ids: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Rows of [`Features`] selected for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub s: Tensor,
    pub s_next: Tensor,
    pub flow: Tensor,
    pub actions: Vec<Action>,
    pub task_ids: Vec<usize>,
}

impl Features {
    pub fn encode(encoder: &Encoder, ds: &Dataset) -> Result<Self> {
        let env = &ds.manifest.env;
        if (env.width, env.height) != (encoder.width, encoder.height) {
            return Err(Error::usage(format!(
                "dataset frames are {}x{}, encoder expects {}x{}",
                env.width, env.height, encoder.width, encoder.height
            )));
        }
        let n = ds.len();
        let d = encoder.state_dim();
        let mut s = vec![0.0; n * d];
        let mut s_next = vec![0.0; n * d];
        let mut flow = vec![0.0; n * d];
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            encoder.encode_into(ds.obs(i), &mut s[r.clone()])?;
            encoder.encode_into(ds.next_obs(i), &mut s_next[r.clone()])?;
            encoder.encode_into(ds.flow_rgb(i), &mut flow[r])?;
        }
        Ok(Self {
            env: env.clone(),
            s: Tensor::new(vec![n, d], s)?,
            s_next: Tensor::new(vec![n, d], s_next)?,
            flow: Tensor::new(vec![n, d], flow)?,
            actions: ds.actions.clone(),
            task_ids: (0..n).map(|i| ds.task_id(i) as usize).collect(),
            train: ds.train_ids(),
            test: ds.test_ids(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.s.cols()
    }

    pub fn batch(&self, ids: &[usize]) -> Batch {
        Batch {
            s: self.s.gather_rows(ids),
            s_next: self.s_next.gather_rows(ids),
            flow: self.flow.gather_rows(ids),
            actions: ids.iter().map(|&i| self.actions[i]).collect(),
            task_ids: ids.iter().map(|&i| self.task_ids[i]).collect(),
        }
    }
}
