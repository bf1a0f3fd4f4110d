//! Learnable half of the pillar representation: a per-slot pointwise
//! encoder, masked max over each pillar's retained slots, and a scatter of
//! pillar vectors back onto the sensor grid. Each polarity has its own
//! encoder; the two halves are concatenated channel-wise.

use rand::Rng;

use crate::error::{Error, Result};
use crate::event::{EventWindow, Polarity};
use crate::nn::{BatchNorm, Graph, Mode, ParamStore, Pointwise, Tensor, Var};
use crate::pillars::{augment, build_pillars, PillarConfig, PillarSet, AUGMENTED_FEATURES};
use crate::repr::GridTensor;

/// Default encoder output width (C').
pub const DEFAULT_CHANNELS: usize = 16;

/// Pointwise conv `6 -> C'` followed by batch norm; relu is applied after.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub conv: Pointwise,
    pub bn: BatchNorm,
    pub channels: usize,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("encoder needs at least one output channel".into()));
        }
        Ok(Self {
            conv: Pointwise::new(store, &format!("{name}.conv"), AUGMENTED_FEATURES, channels, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels)?,
            channels,
        })
    }

    /// conv -> batch norm -> relu on an `N x 6` slot matrix.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, slots: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, slots)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}

/// Encoders for both polarities plus the structural pillar settings.
#[derive(Debug, Clone, Copy)]
pub struct EventPillars {
    pub positive: EncoderParams,
    pub negative: EncoderParams,
    pub pillars: PillarConfig,
}

impl EventPillars {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        pillars: PillarConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        pillars.validate()?;
        Ok(Self {
            positive: EncoderParams::new(store, &format!("{name}.pos"), channels, rng)?,
            negative: EncoderParams::new(store, &format!("{name}.neg"), channels, rng)?,
            pillars,
        })
    }

    /// Output channel count `2 C'`.
    pub fn out_channels(&self) -> usize {
        self.positive.channels + self.negative.channels
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, window: &EventWindow, mode: Mode) -> Result<Var> {
        eventpillars_forward(g, store, window, &self.pillars, &self.positive, &self.negative, mode)
    }

    /// Runs the encoder on its own tape and returns the pseudo-image.
    pub fn pseudo_image(&self, store: &ParamStore, window: &EventWindow, mode: Mode) -> Result<GridTensor> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, window, mode)?;
        let shape = g.shape(v).to_vec();
        let c = self.positive.channels;
        let labels = (0..shape[2])
            .map(|j| if j < c { format!("pos{j}") } else { format!("neg{}", j - c) })
            .collect();
        GridTensor::from_data(shape[0], shape[1], shape[2], g.value(v).data().to_vec(), Some(labels))
    }
}

/// Per-pillar feature `T3` (`len() x C'`): `layer` is applied to every
/// retained slot and the result is max-pooled over each pillar's slots.
/// Empty slots never take part in the max.
pub fn encode_pillars_with<F>(g: &mut Graph, set: &PillarSet, channels: usize, layer: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    if !set.is_augmented() {
        return Err(Error::State("encoder needs an augmented pillar set".into()));
    }
    if set.is_empty() {
        return Ok(g.input(Tensor::zeros(&[0, channels])));
    }
    let (rows, offsets) = set.gather_slots();
    let n = offsets[offsets.len() - 1];
    let x = g.input(Tensor::new(&[n, AUGMENTED_FEATURES], rows)?);
    let y = layer(g, x)?;
    if g.shape(y) != [n, channels] {
        return Err(Error::Shape(format!(
            "slot encoder produced {:?}, expected [{n}, {channels}]",
            g.shape(y)
        )));
    }
    g.segment_max(y, &offsets)
}

pub fn encode_pillars(
    g: &mut Graph,
    store: &ParamStore,
    set: &PillarSet,
    params: &EncoderParams,
    mode: Mode,
) -> Result<Var> {
    encode_pillars_with(g, set, params.channels, |g, x| params.apply(g, store, x, mode))
}

/// Places each pillar row at its grid cell, giving a `rows x cols x C'` map
/// over the pillar grid. With several time slices, rows sharing a cell
/// combine by elementwise max.
pub fn scatter(g: &mut Graph, t3: Var, set: &PillarSet) -> Result<Var> {
    let (cols, rows, slices) = set.grid();
    let targets: Vec<usize> = set
        .coords()
        .iter()
        .map(|c| c[1] as usize * cols + c[0] as usize)
        .collect();
    if slices == 1 {
        // canonical order is (d, y, x), so duplicates would be adjacent
        if let Some(w) = targets.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::State(format!(
                "pillar set holds cell {} twice with a single time slice",
                w[0]
            )));
        }
    }
    if g.shape(t3)[0] != targets.len() {
        return Err(Error::Shape(format!(
            "{} pillar rows for {} pillar coordinates",
            g.shape(t3)[0],
            set.len()
        )));
    }
    g.scatter_max(t3, &targets, rows, cols)
}

/// Pillar encoding of one polarity with a caller-supplied slot layer.
pub fn polarity_image_with<F>(
    g: &mut Graph,
    window: &EventWindow,
    config: &PillarConfig,
    polarity: Polarity,
    channels: usize,
    layer: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let set = augment(&build_pillars(window, config, polarity)?)?;
    let t3 = encode_pillars_with(g, &set, channels, layer)?;
    scatter(g, t3, &set)
}

/// Full pseudo-image `H x W x 2C'`: positive channels then negative.
pub fn eventpillars_forward(
    g: &mut Graph,
    store: &ParamStore,
    window: &EventWindow,
    config: &PillarConfig,
    positive: &EncoderParams,
    negative: &EncoderParams,
    mode: Mode,
) -> Result<Var> {
    let pos = polarity_image_with(g, window, config, Polarity::Positive, positive.channels, |g, x| {
        positive.apply(g, store, x, mode)
    })?;
    let neg = polarity_image_with(g, window, config, Polarity::Negative, negative.channels, |g, x| {
        negative.apply(g, store, x, mode)
    })?;
    g.concat_last(&[pos, neg])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::event::{Event, SensorGeometry};
    use crate::nn::gradcheck;

    fn window(events: Vec<Event>, w: u16, h: u16) -> EventWindow {
        EventWindow::new(events, 0, 1000, SensorGeometry::new(w, h).unwrap()).unwrap()
    }

    fn random_window(seed: u64, n: usize) -> EventWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
        ts.sort_unstable();
        let events = ts
            .into_iter()
            .map(|t| {
                let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Event::new(rng.gen_range(0..8), rng.gen_range(0..6), t, p)
            })
            .collect();
        window(events, 8, 6)
    }

    fn setup(channels: usize) -> (ParamStore, EventPillars) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = PillarConfig { max_events: 64, ..PillarConfig::default() };
        let ep = EventPillars::new(&mut store, "enc", channels, config, &mut rng).unwrap();
        (store, ep)
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let (mut store, ep) = setup(4);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let win = random_window(1, 40);
        let img = ep.pseudo_image(&store, &win, Mode::Train).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_pillar_equals_encoded_event() {
        let (store, ep) = setup(4);
        let win = window(vec![Event::new(4, 2, 500, Polarity::Positive)], 8, 6);
        let set = augment(&build_pillars(&win, &ep.pillars, Polarity::Positive).unwrap()).unwrap();
        let mut g = Graph::new();
        let t3 = encode_pillars(&mut g, &store, &set, &ep.positive, Mode::Train).unwrap();
        let slot = g.input(Tensor::new(&[1, 6], set.slot(0, 0).to_vec()).unwrap());
        let direct = ep.positive.apply(&mut g, &store, slot, Mode::Train).unwrap();
        assert_eq!(g.value(t3).data(), g.value(direct).data());

        let img = scatter(&mut g, t3, &set).unwrap();
        let data = g.value(img).data();
        for (i, chunk) in data.chunks(4).enumerate() {
            if i == 2 * 8 + 4 {
                assert_eq!(chunk, g.value(t3).data());
            } else {
                assert!(chunk.iter().all(|&v| v == 0.0));
            }
        }
    }

    /// Per-slot loop oracle: affine map, batch statistics over all slots,
    /// relu, then max per pillar.
    #[test]
    fn encode_matches_slot_loop_oracle() {
        let (store, ep) = setup(5);
        let win = random_window(4, 300);
        let set = augment(&build_pillars(&win, &ep.pillars, Polarity::Negative).unwrap()).unwrap();
        let mut g = Graph::new();
        let t3 = encode_pillars(&mut g, &store, &set, &ep.negative, Mode::Train).unwrap();

        let w = store.value(ep.negative.conv.weight).data();
        let b = store.value(ep.negative.conv.bias).data();
        let c = 5;
        let mut enc = Vec::new();
        for k in 0..set.len() {
            for m in 0..set.counts()[k] {
                let x = set.slot(k, m);
                let row: Vec<f64> = (0..c)
                    .map(|j| b[j] + (0..6).map(|i| x[i] * w[i * c + j]).sum::<f64>())
                    .collect();
                enc.push((k, row));
            }
        }
        let n = enc.len() as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (_, r) in &enc {
            for j in 0..c {
                mean[j] += r[j] / n;
            }
        }
        for (_, r) in &enc {
            for j in 0..c {
                var[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        let mut expected = vec![f64::NEG_INFINITY; set.len() * c];
        for (k, r) in &enc {
            for j in 0..c {
                let v = ((r[j] - mean[j]) / (var[j] + 1e-5).sqrt()).max(0.0);
                expected[k * c + j] = expected[k * c + j].max(v);
            }
        }
        for (a, e) in g.value(t3).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_window_gives_zero_image() {
        let (store, ep) = setup(3);
        let img = ep.pseudo_image(&store, &window(vec![], 5, 4), Mode::Train).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (4, 5, 6));
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_only_window_leaves_negative_half_zero() {
        let (store, ep) = setup(3);
        let events = (0..20)
            .map(|i| Event::new(i % 5, i % 4, u64::from(i) * 40, Polarity::Positive))
            .collect();
        let img = ep.pseudo_image(&store, &window(events, 5, 4), Mode::Train).unwrap();
        for px in img.data().chunks(6) {
            assert!(px[3..].iter().all(|&v| v == 0.0));
        }
        assert!(img.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn polarity_halves_are_independent() {
        let (store, ep) = setup(4);
        let win = random_window(5, 200);
        let positives = win.events().iter().filter(|e| e.p == Polarity::Positive).copied().collect();
        let full = ep.pseudo_image(&store, &win, Mode::Train).unwrap();
        let only = ep.pseudo_image(&store, &win.with_events(positives).unwrap(), Mode::Train).unwrap();
        for (a, b) in full.data().chunks(8).zip(only.data().chunks(8)) {
            assert_eq!(&a[..4], &b[..4]);
        }
    }

    #[test]
    fn permutation_invariant_without_sampling() {
        let (store, ep) = setup(4);
        let base = window(
            (0..30)
                .map(|i| Event::new(i % 3, (i / 3) % 2, 100, if i % 4 == 0 { Polarity::Negative } else { Polarity::Positive }))
                .collect(),
            3,
            2,
        );
        let reference = ep.pseudo_image(&store, &base, Mode::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let mut evs = base.events().to_vec();
            for i in (1..evs.len()).rev() {
                evs.swap(i, rng.gen_range(0..=i));
            }
            let img = ep.pseudo_image(&store, &base.with_events(evs).unwrap(), Mode::Train).unwrap();
            assert_eq!(img, reference);
        }
    }

    #[test]
    fn two_slices_combine_by_max() {
        let (store, mut ep) = setup(4);
        ep.pillars.time_slices = 2;
        let win = window(
            vec![
                Event::new(1, 1, 100, Polarity::Positive),
                Event::new(2, 0, 200, Polarity::Positive),
                Event::new(1, 1, 900, Polarity::Positive),
            ],
            3,
            2,
        );
        let set = augment(&build_pillars(&win, &ep.pillars, Polarity::Positive).unwrap()).unwrap();
        let mut g = Graph::new();
        let t3 = encode_pillars(&mut g, &store, &set, &ep.positive, Mode::Train).unwrap();
        let img = scatter(&mut g, t3, &set).unwrap();
        let rows = g.value(t3).data().to_vec();
        let px = &g.value(img).data()[(3 + 1) * 4..(3 + 2) * 4];
        let (a, b) = set
            .coords()
            .iter()
            .enumerate()
            .filter(|(_, c)| c[0] == 1 && c[1] == 1)
            .map(|(k, _)| k)
            .fold((None, None), |acc, k| if acc.0.is_none() { (Some(k), None) } else { (acc.0, Some(k)) });
        let (a, b) = (a.unwrap(), b.unwrap());
        for j in 0..4 {
            assert_eq!(px[j], rows[a * 4 + j].max(rows[b * 4 + j]));
        }
    }

    /// Slot layer with the same composition as [`EncoderParams::apply`]
    /// in training mode, over explicit variables.
    fn slot_layer(v: [Var; 4]) -> impl FnOnce(&mut Graph, Var) -> Result<Var> {
        move |g, x| {
            let y = crate::nn::pointwise_conv(g, x, v[0], v[1])?;
            let (y, _) = g.batchnorm(y, v[2], v[3], None, 1e-5)?;
            Ok(g.relu(y))
        }
    }

    #[test]
    fn encoder_weights_pass_gradcheck() {
        let win = window(
            vec![
                Event::new(0, 0, 50, Polarity::Positive),
                Event::new(1, 0, 210, Polarity::Negative),
                Event::new(0, 0, 380, Polarity::Positive),
                Event::new(2, 1, 600, Polarity::Positive),
                Event::new(1, 1, 870, Polarity::Positive),
            ],
            3,
            2,
        );
        let config = PillarConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut inputs = Vec::new();
        for _ in 0..2 {
            inputs.push(Tensor::uniform(&[6, 3], 0.5, &mut rng));
            inputs.push(Tensor::uniform(&[3], 0.5, &mut rng));
            inputs.push(Tensor::full(&[3], 1.0));
            inputs.push(Tensor::full(&[3], 0.5));
        }
        let report = gradcheck(
            |g, v| {
                let pos = slot_layer([v[0], v[1], v[2], v[3]]);
                let neg = slot_layer([v[4], v[5], v[6], v[7]]);
                let p = polarity_image_with(g, &win, &config, Polarity::Positive, 3, pos)?;
                let n = polarity_image_with(g, &win, &config, Polarity::Negative, 3, neg)?;
                let img = g.concat_last(&[p, n])?;
                Ok(g.sum(img))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
