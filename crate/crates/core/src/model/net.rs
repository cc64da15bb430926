use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttentionRecord, BBox, ModelConfig, Predictor};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Tensor, Var};

/// Encoder output attended by both decoders.
#[derive(Clone, Copy, Debug)]
pub struct VisualMemory {
    /// `[N_tokens, memory_dim]`
    pub tokens: Var,
    /// `[N_tokens, memory_dim]`
    pub pos_embed: Var,
    pub grid: (usize, usize),
}

/// Differentiable instance-level head outputs.
#[derive(Clone, Copy, Debug)]
pub struct InstanceVars {
    /// `[Q, 4]` sigmoid boxes.
    pub human_boxes: Var,
    pub object_boxes: Var,
    /// `[Q, K + 1]`, last column is no-object.
    pub object_logits: Var,
}

/// Differentiable relation-level head outputs. Row `i` pairs with row `i`
/// of the instance outputs.
#[derive(Clone, Copy, Debug)]
pub struct RelationVars {
    pub relation_boxes: Var,
    /// `[Q, R]` multi-label logits.
    pub relation_logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceOutputs {
    pub human_boxes: Vec<BBox>,
    pub object_boxes: Vec<BBox>,
    pub object_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationOutputs {
    pub relation_boxes: Vec<BBox>,
    pub relation_logits: Tensor,
}

fn boxes(t: &Tensor) -> Vec<BBox> {
    t.data().chunks(4).map(BBox::from_slice).collect()
}

impl InstanceVars {
    pub fn values(&self, g: &Graph) -> InstanceOutputs {
        InstanceOutputs {
            human_boxes: boxes(g.value(self.human_boxes)),
            object_boxes: boxes(g.value(self.object_boxes)),
            object_logits: g.value(self.object_logits).clone(),
        }
    }
}

impl RelationVars {
    pub fn values(&self, g: &Graph) -> RelationOutputs {
        RelationOutputs {
            relation_boxes: boxes(g.value(self.relation_boxes)),
            relation_logits: g.value(self.relation_logits).clone(),
        }
    }
}

/// Per-layer decoder states (after the branch's final norm) and the
/// cross-attention weights recorded on the way.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub states: Vec<Var>,
    pub attention: Vec<AttentionRecord>,
}

impl DecoderOutput {
    pub fn last(&self) -> Var {
        *self.states.last().expect("decoder has at least one layer")
    }
}

/// One decoding depth: paired instance and relation head outputs.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutputs {
    pub instance: InstanceVars,
    pub relation: RelationVars,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub memory: VisualMemory,
    /// Final decoder layer.
    pub outputs: LayerOutputs,
    /// Earlier decoder layers, shallowest first.
    pub aux: Vec<LayerOutputs>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderBranch {
    tag: Predictor,
    queries: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
}

/// The dual-decoder detector and its parameters.
#[derive(Clone, Debug)]
pub struct PrNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    patch_embed: Linear,
    patch_mix: Linear,
    input_proj: Linear,
    token_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    instance: DecoderBranch,
    relation: Option<DecoderBranch>,
    human_box: Mlp,
    object_box: Mlp,
    object_class: Linear,
    relation_box: Mlp,
    relation_class: Linear,
}

/// Name prefix of the backbone parameter group.
pub const BACKBONE_PREFIX: &str = "backbone.";

impl PrNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = &config;
        let d = c.memory_dim;
        let patch_len = c.input_channels() * c.patch_size * c.patch_size;

        let patch_embed = Linear::new(&mut ps, "backbone.conv1", patch_len, c.backbone_channels, &mut rng)?;
        let patch_mix = Linear::new(&mut ps, "backbone.conv2", c.backbone_channels, c.backbone_channels, &mut rng)?;
        let input_proj = Linear::new(&mut ps, "input_proj", c.backbone_channels, d, &mut rng)?;
        let token_pos = ps.add_xavier("encoder.pos", c.num_tokens(), d, &mut rng)?;
        let encoder = (0..c.encoder_layers)
            .map(|i| {
                let n = format!("encoder.layer{i}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(&mut ps, &format!("{n}.norm1"), d)?,
                    attn: MultiHeadAttention::new(&mut ps, &format!("{n}.attn"), d, c.heads, &mut rng)?,
                    norm2: LayerNorm::new(&mut ps, &format!("{n}.norm2"), d)?,
                    ffn: FeedForward::new(&mut ps, &format!("{n}.ffn"), d, c.ffn_dim, &mut rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let encoder_norm = LayerNorm::new(&mut ps, "encoder.norm", d)?;

        let instance = Self::branch(&mut ps, &mut rng, c, Predictor::Instance, c.instance_decoder_layers)?;
        let relation = if c.parallel_predictor {
            Some(Self::branch(&mut ps, &mut rng, c, Predictor::Relation, c.relation_decoder_layers)?)
        } else {
            None
        };

        let human_box = Mlp::new(&mut ps, "heads.human_box", &[d, d, d, 4], &mut rng)?;
        let object_box = Mlp::new(&mut ps, "heads.object_box", &[d, d, d, 4], &mut rng)?;
        let object_class = Linear::new(&mut ps, "heads.object_class", d, c.num_object_classes + 1, &mut rng)?;
        let relation_box = Mlp::new(&mut ps, "heads.relation_box", &[d, d, d, 4], &mut rng)?;
        let relation_class = Linear::new(&mut ps, "heads.relation_class", d, c.num_relation_classes, &mut rng)?;

        Ok(Self {
            config,
            params: ps,
            patch_embed,
            patch_mix,
            input_proj,
            token_pos,
            encoder,
            encoder_norm,
            instance,
            relation,
            human_box,
            object_box,
            object_class,
            relation_box,
            relation_class,
        })
    }

    fn branch(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c: &ModelConfig,
        tag: Predictor,
        layers: usize,
    ) -> Result<DecoderBranch> {
        let d = c.memory_dim;
        let name = match tag {
            Predictor::Instance => "instance_decoder",
            Predictor::Relation => "relation_decoder",
        };
        let queries = ps.add_xavier(format!("{name}.query"), c.num_queries, d, rng)?;
        let pos = ps.add_xavier(format!("{name}.pos"), c.num_queries, d, rng)?;
        let layers = (0..layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                Ok(DecoderLayer {
                    norm1: LayerNorm::new(ps, &format!("{n}.norm1"), d)?,
                    self_attn: MultiHeadAttention::new(ps, &format!("{n}.self_attn"), d, c.heads, rng)?,
                    norm2: LayerNorm::new(ps, &format!("{n}.norm2"), d)?,
                    cross_attn: MultiHeadAttention::new(ps, &format!("{n}.cross_attn"), d, c.heads, rng)?,
                    norm3: LayerNorm::new(ps, &format!("{n}.norm3"), d)?,
                    ffn: FeedForward::new(ps, &format!("{n}.ffn"), d, c.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), d)?;
        Ok(DecoderBranch {
            tag,
            queries,
            pos,
            layers,
            norm,
        })
    }

    /// Names of the parameters owned by one decoder branch (queries,
    /// positional embeddings, layers and norm).
    pub fn decoder_param_names(&self, which: Predictor) -> Vec<String> {
        let prefix = match which {
            Predictor::Instance => "instance_decoder.",
            Predictor::Relation => "relation_decoder.",
        };
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Patchify convolution stack. Returns `[backbone_channels, H', W']`.
    pub fn extract_features(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let c = &self.config;
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("extract_features", s, &[3, c.image_height, c.image_width]));
        }
        let (h, w, p) = (s[1], s[2], c.patch_size);
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("image {h}x{w} is not divisible by patch size {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let patch_len = c.input_channels() * p * p;
        let mut patches = Vec::with_capacity(gh * gw * patch_len);
        let px = image.data();
        // pixel centres mapped to [-1, 1]
        let coord = |i: usize, n: usize| (2 * i + 1) as f64 / n as f64 - 1.0;
        for py in 0..gh {
            for pxi in 0..gw {
                for ch in 0..3 {
                    for dy in 0..p {
                        let row = (ch * h + py * p + dy) * w + pxi * p;
                        patches.extend_from_slice(&px[row..row + p]);
                    }
                }
                if c.coord_channels {
                    for _ in 0..p {
                        patches.extend((0..p).map(|dx| coord(pxi * p + dx, w)));
                    }
                    for dy in 0..p {
                        patches.extend(std::iter::repeat_n(coord(py * p + dy, h), p));
                    }
                }
            }
        }
        let x = g.constant(Tensor::new(vec![gh * gw, patch_len], patches)?)?;
        let x = self.patch_embed.forward(g, x)?;
        let x = g.relu(x)?;
        let x = self.patch_mix.forward(g, x)?;
        let x = g.transpose(x)?;
        g.reshape(x, &[c.backbone_channels, gh, gw])
    }

    /// Collapses the spatial grid row-major and projects to `memory_dim`.
    pub fn tokenize(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("tokenize", &s, &[self.config.backbone_channels]));
        }
        let flat = g.reshape(features, &[s[0], s[1] * s[2]])?;
        let tokens = g.transpose(flat)?;
        self.input_proj.forward(g, tokens)
    }

    /// Learned per-token positional embedding.
    pub fn token_pos_embed(&self, g: &mut Graph) -> Var {
        g.param(self.token_pos)
    }

    /// Pre-norm transformer encoder. `pos_embed` is added to the attention
    /// queries and keys of every layer, never to the values.
    pub fn encode(&self, g: &mut Graph, tokens: Var, pos_embed: Var, grid: (usize, usize)) -> Result<VisualMemory> {
        if g.shape(tokens) != g.shape(pos_embed) {
            return Err(Error::shape("encode", g.shape(tokens), g.shape(pos_embed)));
        }
        let p = self.config.dropout;
        let mut x = tokens;
        for layer in &self.encoder {
            let x2 = layer.norm1.forward(g, x)?;
            let qk = g.add(x2, pos_embed)?;
            let (a, _) = layer.attn.forward(g, qk, qk, x2, None)?;
            let a = g.dropout(a, p)?;
            x = g.add(x, a)?;
            let x2 = layer.norm2.forward(g, x)?;
            let f = layer.ffn.forward(g, x2, p)?;
            let f = g.dropout(f, p)?;
            x = g.add(x, f)?;
        }
        let tokens = self.encoder_norm.forward(g, x)?;
        Ok(VisualMemory {
            tokens,
            pos_embed,
            grid,
        })
    }

    fn decode(&self, g: &mut Graph, branch: &DecoderBranch, memory: &VisualMemory) -> Result<DecoderOutput> {
        let queries = g.param(branch.queries);
        let pos = g.param(branch.pos);
        self.decode_with(g, branch, memory, queries, pos)
    }

    fn decode_with(
        &self,
        g: &mut Graph,
        branch: &DecoderBranch,
        memory: &VisualMemory,
        queries: Var,
        pos: Var,
    ) -> Result<DecoderOutput> {
        let d = self.config.memory_dim;
        if g.shape(queries) != [self.config.num_queries, d] {
            return Err(Error::shape("decode", g.shape(queries), &[self.config.num_queries, d]));
        }
        let p = self.config.dropout;
        let keys = g.add(memory.tokens, memory.pos_embed)?;
        let mut t = queries;
        let mut states = Vec::with_capacity(branch.layers.len());
        let mut attention = Vec::new();
        for (li, layer) in branch.layers.iter().enumerate() {
            let t2 = layer.norm1.forward(g, t)?;
            let qk = g.add(t2, pos)?;
            let (a, _) = layer.self_attn.forward(g, qk, qk, t2, None)?;
            let a = g.dropout(a, p)?;
            t = g.add(t, a)?;

            let t2 = layer.norm2.forward(g, t)?;
            let q = g.add(t2, pos)?;
            let (a, weights) = layer.cross_attn.forward(g, q, keys, memory.tokens, None)?;
            for (head, w) in weights.into_iter().enumerate() {
                attention.push(AttentionRecord {
                    predictor: branch.tag,
                    layer: li,
                    head,
                    weights: g.value(w).clone(),
                });
            }
            let a = g.dropout(a, p)?;
            t = g.add(t, a)?;

            let t2 = layer.norm3.forward(g, t)?;
            let f = layer.ffn.forward(g, t2, p)?;
            let f = g.dropout(f, p)?;
            t = g.add(t, f)?;
            states.push(branch.norm.forward(g, t)?);
        }
        Ok(DecoderOutput { states, attention })
    }

    /// Instance decoder over the visual memory with its own learned queries.
    pub fn decode_instance(&self, g: &mut Graph, memory: &VisualMemory) -> Result<DecoderOutput> {
        self.decode(g, &self.instance, memory)
    }

    /// Instance decoder with caller-supplied queries and query positions.
    pub fn decode_instance_with(
        &self,
        g: &mut Graph,
        memory: &VisualMemory,
        queries: Var,
        pos: Var,
    ) -> Result<DecoderOutput> {
        self.decode_with(g, &self.instance, memory, queries, pos)
    }

    /// Relation decoder; `None` in shared-decoder mode.
    pub fn decode_relation(&self, g: &mut Graph, memory: &VisualMemory) -> Result<Option<DecoderOutput>> {
        self.relation
            .as_ref()
            .map(|branch| self.decode(g, branch, memory))
            .transpose()
    }

    pub fn instance_heads(&self, g: &mut Graph, states: Var) -> Result<InstanceVars> {
        let h = self.human_box.forward(g, states)?;
        let o = self.object_box.forward(g, states)?;
        Ok(InstanceVars {
            human_boxes: g.sigmoid(h)?,
            object_boxes: g.sigmoid(o)?,
            object_logits: self.object_class.forward(g, states)?,
        })
    }

    pub fn relation_heads(&self, g: &mut Graph, states: Var) -> Result<RelationVars> {
        let u = self.relation_box.forward(g, states)?;
        Ok(RelationVars {
            relation_boxes: g.sigmoid(u)?,
            relation_logits: self.relation_class.forward(g, states)?,
        })
    }

    /// Full pass: features, tokens, encoder, both decoders, all heads.
    /// Auxiliary outputs pair instance layer `i` with relation layer `i`
    /// for every depth below the shallower decoder's last layer.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardOutput> {
        let features = self.extract_features(g, image)?;
        let grid = (g.shape(features)[1], g.shape(features)[2]);
        let tokens = self.tokenize(g, features)?;
        let pos = self.token_pos_embed(g);
        if g.shape(tokens) != g.shape(pos) {
            return Err(Error::shape("token positions", g.shape(tokens), g.shape(pos)));
        }
        let memory = self.encode(g, tokens, pos, grid)?;
        let inst = self.decode_instance(g, &memory)?;
        let rel = self.decode_relation(g, &memory)?;
        let (rel_states, mut attention) = match rel {
            Some(rel) => {
                let mut att = inst.attention.clone();
                att.extend(rel.attention);
                (rel.states, att)
            }
            None => (inst.states.clone(), inst.attention.clone()),
        };
        let depth = inst.states.len().min(rel_states.len());
        let mut aux = Vec::with_capacity(depth - 1);
        for i in 0..depth - 1 {
            aux.push(LayerOutputs {
                instance: self.instance_heads(g, inst.states[i])?,
                relation: self.relation_heads(g, rel_states[i])?,
            });
        }
        let outputs = LayerOutputs {
            instance: self.instance_heads(g, inst.last())?,
            relation: self.relation_heads(g, *rel_states.last().unwrap())?,
        };
        attention.sort_by_key(|r| (r.predictor, r.layer, r.head));
        Ok(ForwardOutput {
            memory,
            outputs,
            aux,
            attention,
        })
    }

    /// Eval-mode forward returning plain values.
    pub fn predict(&self, image: &Tensor) -> Result<(InstanceOutputs, RelationOutputs, Vec<AttentionRecord>)> {
        let mut g = Graph::with_params(&self.params);
        let out = self.forward(&mut g, image)?;
        Ok((
            out.outputs.instance.values(&g),
            out.outputs.relation.values(&g),
            out.attention,
        ))
    }
}
