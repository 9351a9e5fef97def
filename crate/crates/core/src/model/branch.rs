use super::config::{PtNetConfig, SkipMode};
use super::layers::{
    concat_channels, image_hw, split_channels, Bottleneck, BottleneckCache, DecoderCache, PatchCache,
    PatchEmbedBlock, PerformerDecoder, PerformerEncoder,
};
use crate::attention::{default_feature_count, BlockSpec};
use crate::error::Result;
use crate::params::{ParamId, ParameterStore};
use crate::patching::{resize_backward, resize_to, Interp, UnfoldSpec};
use crate::tensor::{Rng, Scalar, Tensor};

/// One pyramid: stem, strided encoders, bottleneck, upsampling decoders and
/// a final stride-1 decoder at the input resolution.
#[derive(Debug, Clone)]
pub struct Branch {
    pub stem: PerformerEncoder,
    pub encoders: Vec<PerformerEncoder>,
    pub bottleneck: Bottleneck,
    pub decoders: Vec<PerformerDecoder>,
    pub head: PerformerDecoder,
    pub skip: SkipMode,
    pub interp: Interp,
    pub in_channels: usize,
    /// Channels of an extra map concatenated before the head.
    pub fused_channels: usize,
}

#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    input: Tensor<T>,
    features: Vec<Tensor<T>>,
    stem: PatchCache<T>,
    encoders: Vec<PatchCache<T>>,
    bottleneck: BottleneckCache<T>,
    bottleneck_hw: (usize, usize),
    decoders: Vec<DecoderCache<T>>,
    head: DecoderCache<T>,
}

impl Branch {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        cfg: &PtNetConfig,
        index: usize,
        in_channels: usize,
        fused_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let performer = |dim: usize| BlockSpec {
            dim,
            heads: cfg.heads,
            ffn_ratio: cfg.performer_ffn_ratio,
            favor_features: Some(
                cfg.favor_features
                    .unwrap_or_else(|| default_feature_count(dim / cfg.heads)),
            ),
            redraw: cfg.redraw,
            norm: cfg.norm,
            activation: cfg.activation,
            qkv_bias: cfg.qkv_bias,
        };
        let k = cfg.encoder_channels.len();
        let stem = PerformerEncoder(PatchEmbedBlock::new(
            store,
            &format!("{name}.stem"),
            in_channels,
            cfg.stem_channels,
            UnfoldSpec::new(cfg.stem_window, 1),
            &performer(cfg.stem_channels),
            rng,
        )?);
        let mut encoders = Vec::with_capacity(k);
        let mut cin = cfg.stem_channels;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            encoders.push(PerformerEncoder(PatchEmbedBlock::new(
                store,
                &format!("{name}.enc{}", i + 1),
                cin,
                c,
                UnfoldSpec::new(cfg.inner_window, cfg.encoder_stride),
                &performer(c),
                rng,
            )?));
            cin = c;
        }
        let embed = cfg.embed_dims[index];
        let bottleneck = Bottleneck::new(
            store,
            &format!("{name}.bottleneck"),
            cin,
            cfg.depths[index],
            &BlockSpec {
                dim: embed,
                ffn_ratio: cfg.bottleneck_ffn_ratio,
                favor_features: None,
                ..performer(embed)
            },
            rng,
        )?;
        let mut decoders = Vec::with_capacity(k);
        let mut prev = embed;
        for j in 0..k {
            let skip = cfg.encoder_channels[k - 1 - j];
            let cout = cfg.decoder_channels[j];
            decoders.push(PerformerDecoder {
                inner: PatchEmbedBlock::new(
                    store,
                    &format!("{name}.dec{}", j + 1),
                    prev + skip,
                    cout,
                    UnfoldSpec::new(cfg.inner_window, 1),
                    &performer(cout),
                    rng,
                )?,
                interp: cfg.interp,
            });
            prev = cout;
        }
        let skip0 = match cfg.skip {
            SkipMode::Both => in_channels + cfg.stem_channels,
            SkipMode::Inputs => in_channels,
            SkipMode::Outputs => cfg.stem_channels,
        };
        let cout = cfg.decoder_channels[k];
        let head = PerformerDecoder {
            inner: PatchEmbedBlock::new(
                store,
                &format!("{name}.head"),
                prev + skip0 + fused_channels,
                cout,
                UnfoldSpec::new(cfg.stem_window, 1),
                &performer(cout),
                rng,
            )?,
            interp: cfg.interp,
        };
        Ok(Self {
            stem,
            encoders,
            bottleneck,
            decoders,
            head,
            skip: cfg.skip,
            interp: cfg.interp,
            in_channels,
            fused_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.head.inner.cout
    }

    /// Grid extent of every pyramid level, finest first, ending with the
    /// bottleneck.
    pub fn level_extents(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(h, w)];
        for e in &self.encoders {
            let (a, b) = *out.last().unwrap();
            out.push(e.output_extent(a, b));
        }
        let (a, b) = *out.last().unwrap();
        out.push((self.bottleneck.spec.grid_extent(a), self.bottleneck.spec.grid_extent(b)));
        out
    }

    fn skip0_widths(&self) -> Vec<usize> {
        let stem = self.stem.0.cout;
        match self.skip {
            SkipMode::Both => vec![self.in_channels, stem],
            SkipMode::Inputs => vec![self.in_channels],
            SkipMode::Outputs => vec![stem],
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParameterStore<T>,
        x: Tensor<T>,
        fused: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, BranchCache<T>)> {
        let (stem_out, stem) = self.stem.forward(p, &x)?;
        let mut features = vec![stem_out];
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for e in &self.encoders {
            let (y, c) = e.forward(p, features.last().unwrap())?;
            features.push(y);
            encoders.push(c);
        }
        let deepest = features.last().unwrap();
        let (b, bottleneck) = self.bottleneck.forward(p, deepest)?;
        let bottleneck_hw = image_hw(&b);
        let (dh, dw) = image_hw(deepest);
        let mut d = resize_to(&b, dh, dw, self.interp)?;
        drop(b);

        let k = self.encoders.len();
        let mut decoders = Vec::with_capacity(k);
        for (j, dec) in self.decoders.iter().enumerate() {
            let level = k - j;
            let input = concat_channels(&[&d, &features[level]])?;
            let target = image_hw(&features[level - 1]);
            let (y, c) = dec.forward(p, &input, target)?;
            decoders.push(c);
            d = y;
        }
        let mut parts = vec![&d];
        match self.skip {
            SkipMode::Both => parts.extend([&x, &features[0]]),
            SkipMode::Inputs => parts.push(&x),
            SkipMode::Outputs => parts.push(&features[0]),
        }
        parts.extend(fused);
        let input = concat_channels(&parts)?;
        let target = image_hw(&x);
        let (out, head) = self.head.forward(p, &input, target)?;
        Ok((
            out,
            BranchCache {
                input: x,
                features,
                stem,
                encoders,
                bottleneck,
                bottleneck_hw,
                decoders,
                head,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient of the
    /// fused map, if one was supplied.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut ParameterStore<T>,
        c: &BranchCache<T>,
        dout: &Tensor<T>,
    ) -> Result<Option<Tensor<T>>> {
        let k = self.encoders.len();
        let mut dfeat: Vec<Option<Tensor<T>>> = vec![None; k + 1];
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(s) => s.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        let dinput = self.head.backward(p, &c.head, dout)?;
        let mut widths = vec![self.decoders.last().map_or(self.bottleneck.embed_dim, |d| d.inner.cout)];
        widths.extend(self.skip0_widths());
        if self.fused_channels > 0 {
            widths.push(self.fused_channels);
        }
        let mut parts = split_channels(&dinput, &widths).into_iter();
        let mut dd = parts.next().unwrap();
        match self.skip {
            SkipMode::Both => {
                parts.next();
                accumulate(&mut dfeat[0], parts.next().unwrap())?;
            }
            SkipMode::Inputs => {
                parts.next();
            }
            SkipMode::Outputs => accumulate(&mut dfeat[0], parts.next().unwrap())?,
        }
        let dfused = parts.next();

        for (j, (dec, dc)) in self.decoders.iter().zip(&c.decoders).enumerate().rev() {
            let level = k - j;
            let din = dec.backward(p, dc, &dd)?;
            let prev = din.dim(1) - c.features[level].dim(1);
            let mut halves = split_channels(&din, &[prev, c.features[level].dim(1)]).into_iter();
            dd = halves.next().unwrap();
            accumulate(&mut dfeat[level], halves.next().unwrap())?;
        }

        let db = resize_backward(&dd, c.bottleneck_hw.0, c.bottleneck_hw.1, self.interp)?;
        let g = self.bottleneck.backward(p, &c.bottleneck, &c.features[k], &db)?;
        accumulate(&mut dfeat[k], g)?;
        for (i, (e, ec)) in self.encoders.iter().zip(&c.encoders).enumerate().rev() {
            let dy = dfeat[i + 1].take().expect("every level receives a gradient");
            let dx = e.backward(p, ec, &c.features[i], &dy, true)?.unwrap();
            accumulate(&mut dfeat[i], dx)?;
        }
        let dy = dfeat[0].take().expect("stem output receives a gradient");
        self.stem.backward(p, &c.stem, &c.input, &dy, false)?;
        Ok(dfused)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.stem
            .0
            .param_ids()
            .chain(self.encoders.iter().flat_map(|e| e.0.param_ids()))
            .chain(self.bottleneck.param_ids())
            .chain(self.decoders.iter().flat_map(|d| d.inner.param_ids()))
            .chain(self.head.inner.param_ids())
    }
}
