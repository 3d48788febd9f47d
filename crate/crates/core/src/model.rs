use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlamd_tensor::Tensor;

use crate::backbone::{BackboneConfig, FeatureMap, TextBackbone};
use crate::config::Config;
use crate::error::Result;
use crate::params::{Init, ParamStore};
use crate::transd::{TransDDecoder, TransDDims};
use crate::vlad::{VladDecoder, VladDims};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::L2R, Direction::R2L];

    pub fn index(self) -> usize {
        match self {
            Direction::L2R => 0,
            Direction::R2L => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::L2R => Direction::R2L,
            Direction::R2L => Direction::L2R,
        }
    }

    /// Content tokens in this direction's reading order.
    pub fn orient(self, content: &[usize]) -> Vec<usize> {
        match self {
            Direction::L2R => content.to_vec(),
            Direction::R2L => content.iter().rev().copied().collect(),
        }
    }
}

/// Shared backbone plus the four decoding heads (VLAD and TransD, each in
/// both reading directions, with independent weights).
#[derive(Debug, Clone)]
pub struct Vlamd {
    pub config: Config,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub backbone: TextBackbone,
    vlad: [VladDecoder; 2],
    transd: [TransDDecoder; 2],
}

impl Vlamd {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: &Config, seed: u64) -> Result<Vlamd> {
        config.validate()?;
        let vocab = Vocab::new(&config.data.charset)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let backbone = TextBackbone::new(&mut init, BackboneConfig::from_config(config))?;
        let vd = VladDims::from_config(config, &vocab);
        let td = TransDDims::from_config(config, &vocab);
        let vlad = [
            VladDecoder::new(&mut init.scope("vlad").scope("l2r"), vd.clone())?,
            VladDecoder::new(&mut init.scope("vlad").scope("r2l"), vd)?,
        ];
        let transd = [
            TransDDecoder::new(&mut init.scope("transd").scope("l2r"), td.clone())?,
            TransDDecoder::new(&mut init.scope("transd").scope("r2l"), td)?,
        ];
        Ok(Vlamd {
            config: config.clone(),
            vocab,
            store,
            backbone,
            vlad,
            transd,
        })
    }

    pub fn vlad(&self, dir: Direction) -> &VladDecoder {
        &self.vlad[dir.index()]
    }

    pub fn transd(&self, dir: Direction) -> &TransDDecoder {
        &self.transd[dir.index()]
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeatureMap> {
        self.backbone.encode(&self.store, images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_is_an_involution() {
        let s = [3, 1, 4, 1, 5];
        let r = Direction::R2L.orient(&s);
        assert_eq!(r, vec![5, 1, 4, 1, 3]);
        assert_eq!(Direction::R2L.orient(&r), s.to_vec());
        assert_eq!(Direction::L2R.orient(&s), s.to_vec());
    }
}
