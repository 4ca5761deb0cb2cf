#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "acdm/ops.hpp"
#include "acdm/rng.hpp"

namespace acdm {

enum class BackboneKind { unet, resnet, resnet_dilated, fno };

inline std::string to_string(BackboneKind k) {
    switch (k) {
        case BackboneKind::unet: return "unet";
        case BackboneKind::resnet: return "resnet";
        case BackboneKind::resnet_dilated: return "resnet-dilated";
        case BackboneKind::fno: return "fno";
    }
    return "?";
}

inline BackboneKind backbone_kind_from(const std::string& s) {
    if (s == "unet") return BackboneKind::unet;
    if (s == "resnet") return BackboneKind::resnet;
    if (s == "resnet-dilated") return BackboneKind::resnet_dilated;
    if (s == "fno") return BackboneKind::fno;
    throw std::invalid_argument("unknown backbone kind '" + s + "'");
}

struct BackboneSpec {
    BackboneKind kind = BackboneKind::unet;
    int in_channels = 12;
    int out_channels = 4;
    int width = 32;          // fno: 0 = auto-scale to the unet reference count
    int unet_levels = 3;     // constant width per level
    int resnet_blocks = 4;
    int resnet_layers = 7;
    std::vector<int> dilation = {1, 2, 4, 8, 4, 2, 1};  // fixed pattern for resnet-dilated
    int fno_layers = 4;
    int modes_x = 16, modes_y = 8;
    int step_embed_dim = 0;  // unet only; 0 disables the diffusion-step input
    bool modern = true;      // group norm + step embedding; false = ablation backbone
    bool attention = false;  // optional linear attention at the bottleneck
    int attention_heads = 1;

    bool uses_step_embedding() const {
        return kind == BackboneKind::unet && step_embed_dim > 0 && modern;
    }

    void validate() const {
        if (in_channels < 1 || out_channels < 1)
            throw std::invalid_argument("backbone: channel counts must be >= 1");
        if (width < 1 && !(kind == BackboneKind::fno && width == 0))
            throw std::invalid_argument("backbone: zero-width spec rejected");
        if (kind == BackboneKind::unet) {
            if (unet_levels < 1) throw std::invalid_argument("backbone: unet needs >= 1 level");
            if (step_embed_dim > 0 && step_embed_dim % 2 != 0)
                throw std::invalid_argument("backbone: step embedding dim must be even (sin/cos pairs)");
            if (attention && width % std::max(attention_heads, 1) != 0)
                throw std::invalid_argument("backbone: attention heads must divide the width");
        }
        if (kind == BackboneKind::resnet_dilated && dilation != std::vector<int>{1, 2, 4, 8, 4, 2, 1})
            throw std::invalid_argument("backbone: resnet-dilated pattern is fixed to (1,2,4,8,4,2,1)");
        if (kind == BackboneKind::resnet || kind == BackboneKind::resnet_dilated) {
            if (static_cast<int>(dilation.size()) != resnet_layers)
                throw std::invalid_argument("backbone: dilation pattern length must equal resnet layers");
        }
        if (kind == BackboneKind::fno && (modes_x < 1 || modes_y < 1))
            throw std::invalid_argument("backbone: fno mode counts must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Diffusion-step embedding
// ---------------------------------------------------------------------------

/// Pre-MLP sinusoidal features for diffusion step r: geometric frequency
/// ladder, [sin(r*w_0..), cos(r*w_0..)]. dim must be even.
inline std::vector<double> embed_diffusion_step(int r, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("embed_diffusion_step: dim must be even and >= 2");
    int half = dim / 2;
    std::vector<double> out(dim);
    for (int i = 0; i < half; ++i) {
        double omega = half > 1 ? std::exp(-std::log(10000.0) * i / (half - 1)) : 1.0;
        out[i] = std::sin(r * omega);
        out[half + i] = std::cos(r * omega);
    }
    return out;
}

template <class Real>
TensorPtr<Real> embed_diffusion_steps(const std::vector<int>& rs, int dim) {
    auto t = tensor<Real>({static_cast<int>(rs.size()), dim});
    for (size_t n = 0; n < rs.size(); ++n) {
        auto e = embed_diffusion_step(rs[n], dim);
        for (int i = 0; i < dim; ++i) t->data[n * dim + i] = static_cast<Real>(e[i]);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A built backbone: named parameters plus a pure forward function of
/// (weights, input, diffusion step). Forward is re-entrant across threads on
/// read-only weights; eval_count supports the cost-proportionality audit.
template <class Real>
struct Model {
    BackboneSpec spec;
    std::vector<TensorPtr<Real>> params;
    std::function<TensorPtr<Real>(const TensorPtr<Real>&, const TensorPtr<Real>&)> fwd;
    mutable std::atomic<int64_t> eval_count{0};

    Model() = default;
    Model(Model&& o) noexcept
        : spec(std::move(o.spec)), params(std::move(o.params)), fwd(std::move(o.fwd)),
          eval_count(o.eval_count.load()) {}
    Model& operator=(Model&& o) noexcept {
        spec = std::move(o.spec);
        params = std::move(o.params);
        fwd = std::move(o.fwd);
        eval_count = o.eval_count.load();
        return *this;
    }
    Model(const Model& o) : spec(o.spec), params(o.params), fwd(o.fwd), eval_count(o.eval_count.load()) {}

    TensorPtr<Real> forward(const TensorPtr<Real>& x, const std::vector<int>& rsteps = {}) const {
        ++eval_count;
        if (spec.uses_step_embedding()) {
            if (rsteps.size() != static_cast<size_t>(x->shape[0]))
                throw std::invalid_argument("backbone: diffusion step r required for every sample (got " +
                                            std::to_string(rsteps.size()) + " for batch " +
                                            std::to_string(x->shape[0]) + ")");
            return fwd(x, embed_diffusion_steps<Real>(rsteps, spec.step_embed_dim));
        }
        if (!rsteps.empty())
            throw std::invalid_argument("backbone: diffusion step r supplied to a non-diffusion backbone");
        return fwd(x, nullptr);
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& p : params) n += p->numel();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
struct ParamFactory {
    std::vector<TensorPtr<Real>>& params;
    Rng& rng;

    TensorPtr<Real> make(std::vector<int> shape, const std::string& name, double std_dev) {
        auto t = leaf<Real>(std::move(shape), name);
        for (auto& v : t->data) v = static_cast<Real>(rng.normal() * std_dev);
        params.push_back(t);
        return t;
    }
    TensorPtr<Real> conv(const std::string& name, int o, int c, int k) {
        return make({o, c, k, k}, name, std::sqrt(2.0 / (c * k * k)));
    }
    TensorPtr<Real> zeros(std::vector<int> shape, const std::string& name) {
        auto t = leaf<Real>(std::move(shape), name);
        params.push_back(t);
        return t;
    }
    TensorPtr<Real> ones(std::vector<int> shape, const std::string& name) {
        auto t = leaf<Real>(std::move(shape), name, Real(1));
        t->requires_grad = true;
        params.push_back(t);
        return t;
    }
};

template <class Real>
struct UNetBlock {
    TensorPtr<Real> w1, b1, g1, gb1, w2, b2, g2, gb2;
    TensorPtr<Real> res_w, res_b;  // 1x1 projection when channel counts differ
    TensorPtr<Real> emb_w, emb_b;  // per-block step-embedding projection
};

template <class Real>
UNetBlock<Real> make_block(ParamFactory<Real>& f, const std::string& name, int cin, int cout,
                           int emb_dim, bool modern) {
    UNetBlock<Real> b;
    b.w1 = f.conv(name + ".conv1.weight", cout, cin, 3);
    b.b1 = f.zeros({cout}, name + ".conv1.bias");
    b.w2 = f.conv(name + ".conv2.weight", cout, cout, 3);
    b.b2 = f.zeros({cout}, name + ".conv2.bias");
    if (modern) {
        b.g1 = f.ones({cout}, name + ".norm1.gain");
        b.gb1 = f.zeros({cout}, name + ".norm1.bias");
        b.g2 = f.ones({cout}, name + ".norm2.gain");
        b.gb2 = f.zeros({cout}, name + ".norm2.bias");
    }
    if (cin != cout) {
        b.res_w = f.make({cout, cin, 1, 1}, name + ".res.weight", std::sqrt(1.0 / cin));
        b.res_b = f.zeros({cout}, name + ".res.bias");
    }
    if (emb_dim > 0 && modern) {
        b.emb_w = f.make({cout, emb_dim}, name + ".emb.weight", std::sqrt(1.0 / emb_dim));
        b.emb_b = f.zeros({cout}, name + ".emb.bias");
    }
    return b;
}

inline int norm_groups(int channels) { return channels % 8 == 0 ? 8 : 1; }

template <class Real>
TensorPtr<Real> apply_block(const UNetBlock<Real>& blk, const TensorPtr<Real>& x,
                            const TensorPtr<Real>& emb, bool modern) {
    auto h = bias_channel(conv2d(x, blk.w1, 1, 1, 1), blk.b1);
    if (modern) h = group_norm(h, norm_groups(blk.w1->shape[0]), blk.g1, blk.gb1);
    if (emb && blk.emb_w) h = bias_sample_channel(h, dense(emb, blk.emb_w, blk.emb_b));
    h = silu(h);
    h = bias_channel(conv2d(h, blk.w2, 1, 1, 1), blk.b2);
    if (modern) h = group_norm(h, norm_groups(blk.w2->shape[0]), blk.g2, blk.gb2);
    h = silu(h);
    auto res = blk.res_w ? bias_channel(conv2d(x, blk.res_w), blk.res_b) : x;
    return add(h, res);
}

template <class Real>
struct AttentionLayer {
    TensorPtr<Real> qw, kw, vw, proj_w, proj_b;
    int heads = 1;
};

/// Softmax-normalized linear attention: per head, keys are normalized over
/// space and queries over channels, so cost stays linear in H*W.
template <class Real>
TensorPtr<Real> apply_attention(const AttentionLayer<Real>& at, const TensorPtr<Real>& x) {
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    int hw = h * w, ch = c / at.heads;
    auto q = conv2d(x, at.qw), k = conv2d(x, at.kw), v = conv2d(x, at.vw);
    std::vector<TensorPtr<Real>> heads;
    for (int hd = 0; hd < at.heads; ++hd) {
        auto qh = reshape(slice_channels(q, hd * ch, ch), {n, ch, hw});
        auto kh = reshape(slice_channels(k, hd * ch, ch), {n, ch, hw});
        auto vh = reshape(slice_channels(v, hd * ch, ch), {n, ch, hw});
        auto k_sm = softmax_last(kh);                       // over space
        auto q_sm = softmax_last(transpose_12(qh));         // over channels
        auto ctx = bmm(k_sm, transpose_12(vh));             // [n, ch, ch]
        auto out = transpose_12(bmm(q_sm, ctx));            // [n, ch, hw]
        heads.push_back(reshape(out, {n, ch, h, w}));
    }
    auto merged = at.heads == 1 ? heads[0] : concat_channels(heads);
    return add(x, bias_channel(conv2d(merged, at.proj_w), at.proj_b));
}

}  // namespace detail

template <class Real>
Model<Real> build_unet(const BackboneSpec& spec, Rng& rng) {
    Model<Real> m;
    m.spec = spec;
    detail::ParamFactory<Real> f{m.params, rng};
    const int W = spec.width, L = spec.unet_levels, E = spec.step_embed_dim;
    const bool modern = spec.modern;

    struct Layers {
        TensorPtr<Real> stem_w, stem_b, final_w, final_b;
        TensorPtr<Real> mlp1_w, mlp1_b, mlp2_w, mlp2_b;
        std::vector<detail::UNetBlock<Real>> down, up;
        detail::UNetBlock<Real> mid;
        detail::AttentionLayer<Real> att;
        bool use_att = false;
    };
    auto ly = std::make_shared<Layers>();

    ly->stem_w = f.conv("unet.stem.weight", W, spec.in_channels, 3);
    ly->stem_b = f.zeros({W}, "unet.stem.bias");
    if (spec.uses_step_embedding()) {
        ly->mlp1_w = f.make({E, E}, "unet.emb_mlp.fc1.weight", std::sqrt(1.0 / E));
        ly->mlp1_b = f.zeros({E}, "unet.emb_mlp.fc1.bias");
        ly->mlp2_w = f.make({E, E}, "unet.emb_mlp.fc2.weight", std::sqrt(1.0 / E));
        ly->mlp2_b = f.zeros({E}, "unet.emb_mlp.fc2.bias");
    }
    for (int l = 0; l < L; ++l)
        ly->down.push_back(detail::make_block(f, "unet.down" + std::to_string(l), W, W, E, modern));
    ly->mid = detail::make_block(f, "unet.mid", W, W, E, modern);
    if (spec.attention) {
        ly->use_att = true;
        ly->att.heads = spec.attention_heads;
        ly->att.qw = f.make({W, W, 1, 1}, "unet.att.q.weight", std::sqrt(1.0 / W));
        ly->att.kw = f.make({W, W, 1, 1}, "unet.att.k.weight", std::sqrt(1.0 / W));
        ly->att.vw = f.make({W, W, 1, 1}, "unet.att.v.weight", std::sqrt(1.0 / W));
        ly->att.proj_w = f.make({W, W, 1, 1}, "unet.att.proj.weight", std::sqrt(1.0 / W));
        ly->att.proj_b = f.zeros({W}, "unet.att.proj.bias");
    }
    for (int l = 0; l < L; ++l)
        ly->up.push_back(detail::make_block(f, "unet.up" + std::to_string(l), 2 * W, W, E, modern));
    ly->final_w = f.conv("unet.final.weight", spec.out_channels, W, 3);
    ly->final_b = f.zeros({spec.out_channels}, "unet.final.bias");

    const int levels = L;
    m.fwd = [ly, levels, modern](const TensorPtr<Real>& x, const TensorPtr<Real>& sinus) -> TensorPtr<Real> {
        int div = 1 << (levels - 1);
        if (x->shape[2] % div || x->shape[3] % div)
            throw std::invalid_argument("unet: spatial dims " + shape_str(x->shape) +
                                        " not divisible by 2^(levels-1) = " + std::to_string(div));
        TensorPtr<Real> emb;
        if (sinus) {
            emb = dense(sinus, ly->mlp1_w, ly->mlp1_b);
            emb = silu(emb);
            emb = dense(emb, ly->mlp2_w, ly->mlp2_b);
        }
        auto h = bias_channel(conv2d(x, ly->stem_w, 1, 1, 1), ly->stem_b);
        std::vector<TensorPtr<Real>> skips;
        for (int l = 0; l < levels; ++l) {
            h = detail::apply_block(ly->down[l], h, emb, modern);
            skips.push_back(h);
            if (l < levels - 1) h = avg_pool2(h);
        }
        h = detail::apply_block(ly->mid, h, emb, modern);
        if (ly->use_att) h = detail::apply_attention(ly->att, h);
        for (int l = levels - 1; l >= 0; --l) {
            h = concat_channels(h, skips[l]);
            h = detail::apply_block(ly->up[levels - 1 - l], h, emb, modern);
            if (l > 0) h = nearest_upsample2(h);
        }
        return bias_channel(conv2d(h, ly->final_w, 1, 1, 1), ly->final_b);
    };
    return m;
}

template <class Real>
Model<Real> build_resnet(const BackboneSpec& spec, Rng& rng) {
    Model<Real> m;
    m.spec = spec;
    detail::ParamFactory<Real> f{m.params, rng};
    const int W = spec.width;
    std::vector<int> dil = spec.kind == BackboneKind::resnet_dilated
                               ? spec.dilation
                               : std::vector<int>(spec.resnet_layers, 1);

    struct Layers {
        TensorPtr<Real> enc_w, enc_b, dec_w, dec_b;
        std::vector<std::vector<std::pair<TensorPtr<Real>, TensorPtr<Real>>>> blocks;
    };
    auto ly = std::make_shared<Layers>();
    ly->enc_w = f.conv("resnet.enc.weight", W, spec.in_channels, 3);
    ly->enc_b = f.zeros({W}, "resnet.enc.bias");
    for (int b = 0; b < spec.resnet_blocks; ++b) {
        std::vector<std::pair<TensorPtr<Real>, TensorPtr<Real>>> convs;
        for (int l = 0; l < spec.resnet_layers; ++l) {
            std::string nm = "resnet.block" + std::to_string(b) + ".conv" + std::to_string(l);
            convs.emplace_back(f.conv(nm + ".weight", W, W, 3), f.zeros({W}, nm + ".bias"));
        }
        ly->blocks.push_back(std::move(convs));
    }
    ly->dec_w = f.conv("resnet.dec.weight", spec.out_channels, W, 3);
    ly->dec_b = f.zeros({spec.out_channels}, "resnet.dec.bias");

    m.fwd = [ly, dil](const TensorPtr<Real>& x, const TensorPtr<Real>&) -> TensorPtr<Real> {
        auto h = bias_channel(conv2d(x, ly->enc_w, 1, 1, 1), ly->enc_b);
        for (const auto& block : ly->blocks) {
            auto t = h;
            for (size_t l = 0; l < block.size(); ++l) {
                t = bias_channel(conv2d(t, block[l].first, 1, dil[l], dil[l]), block[l].second);
                if (l + 1 < block.size()) t = silu(t);
            }
            h = add(h, t);
        }
        return bias_channel(conv2d(h, ly->dec_w, 1, 1, 1), ly->dec_b);
    };
    return m;
}

template <class Real>
Model<Real> build_fno(const BackboneSpec& spec, Rng& rng) {
    Model<Real> m;
    m.spec = spec;
    detail::ParamFactory<Real> f{m.params, rng};
    const int W = spec.width, mx = spec.modes_x, my = spec.modes_y;

    struct Layers {
        TensorPtr<Real> lift_w, lift_b, proj1_w, proj1_b, proj2_w, proj2_b;
        std::vector<std::pair<TensorPtr<Real>, std::pair<TensorPtr<Real>, TensorPtr<Real>>>> layers;
    };
    auto ly = std::make_shared<Layers>();
    ly->lift_w = f.make({W, spec.in_channels, 1, 1}, "fno.lift.weight", std::sqrt(1.0 / spec.in_channels));
    ly->lift_b = f.zeros({W}, "fno.lift.bias");
    for (int l = 0; l < spec.fno_layers; ++l) {
        std::string nm = "fno.layer" + std::to_string(l);
        auto sw = f.make({W, W, my, mx, 2}, nm + ".spectral.weight", 1.0 / (W * std::sqrt(static_cast<double>(mx * my))));
        auto bw = f.make({W, W, 1, 1}, nm + ".bypass.weight", std::sqrt(1.0 / W));
        auto bb = f.zeros({W}, nm + ".bypass.bias");
        ly->layers.emplace_back(sw, std::make_pair(bw, bb));
    }
    ly->proj1_w = f.make({2 * W, W, 1, 1}, "fno.proj1.weight", std::sqrt(1.0 / W));
    ly->proj1_b = f.zeros({2 * W}, "fno.proj1.bias");
    ly->proj2_w = f.make({spec.out_channels, 2 * W, 1, 1}, "fno.proj2.weight", std::sqrt(0.5 / W));
    ly->proj2_b = f.zeros({spec.out_channels}, "fno.proj2.bias");

    m.fwd = [ly, mx, my](const TensorPtr<Real>& x, const TensorPtr<Real>&) -> TensorPtr<Real> {
        auto h = bias_channel(conv2d(x, ly->lift_w), ly->lift_b);
        for (size_t l = 0; l < ly->layers.size(); ++l) {
            auto s = spectral_conv2d(h, ly->layers[l].first, mx, my);
            auto c = bias_channel(conv2d(h, ly->layers[l].second.first), ly->layers[l].second.second);
            h = add(s, c);
            if (l + 1 < ly->layers.size()) h = silu(h);
        }
        h = silu(bias_channel(conv2d(h, ly->proj1_w), ly->proj1_b));
        return bias_channel(conv2d(h, ly->proj2_w), ly->proj2_b);
    };
    return m;
}

/// Parameter count for a spec without building tensors (used by auto-scaling).
inline int64_t spec_param_count(const BackboneSpec& spec) {
    const int64_t in = spec.in_channels, out = spec.out_channels, W = spec.width;
    if (spec.kind == BackboneKind::unet) {
        const int64_t E = spec.step_embed_dim;
        auto block = [&](int64_t cin, int64_t cout) {
            int64_t n = cout * cin * 9 + cout + cout * cout * 9 + cout;  // convs
            if (spec.modern) n += 4 * cout;                              // two group norms
            if (cin != cout) n += cout * cin + cout;                     // 1x1 residual
            if (E > 0 && spec.modern) n += cout * E + cout;              // embedding projection
            return n;
        };
        int64_t n = W * in * 9 + W + out * W * 9 + out;
        if (spec.uses_step_embedding()) n += 2 * (E * E + E);
        n += spec.unet_levels * block(W, W) + block(W, W) + spec.unet_levels * block(2 * W, W);
        if (spec.attention) n += 4 * W * W + W;
        return n;
    }
    if (spec.kind == BackboneKind::resnet || spec.kind == BackboneKind::resnet_dilated) {
        int64_t n = W * in * 9 + W + out * W * 9 + out;
        n += static_cast<int64_t>(spec.resnet_blocks) * spec.resnet_layers * (W * W * 9 + W);
        return n;
    }
    // fno
    int64_t n = W * in + W;
    n += static_cast<int64_t>(spec.fno_layers) * (W * W * spec.modes_y * spec.modes_x * 2 + W * W + W);
    n += 2 * W * W + 2 * W + out * 2 * W + out;
    return n;
}

/// Auto-scales the FNO width so its parameter count lands within +/-20% of a
/// width-32 U-Net reference with the same channel interface.
inline int auto_fno_width(const BackboneSpec& fno_spec, int reference_unet_width = 32) {
    BackboneSpec ref;
    ref.kind = BackboneKind::unet;
    ref.in_channels = fno_spec.in_channels;
    ref.out_channels = fno_spec.out_channels;
    ref.width = reference_unet_width;
    ref.step_embed_dim = 0;
    int64_t target = spec_param_count(ref);
    int best_w = 1;
    int64_t best_err = std::numeric_limits<int64_t>::max();
    BackboneSpec probe = fno_spec;
    for (int w = 1; w <= 1024; ++w) {
        probe.width = w;
        int64_t err = std::abs(spec_param_count(probe) - target);
        if (err < best_err) {
            best_err = err;
            best_w = w;
        }
        if (spec_param_count(probe) > 2 * target) break;
    }
    probe.width = best_w;
    double ratio = static_cast<double>(spec_param_count(probe)) / static_cast<double>(target);
    if (ratio < 0.8 || ratio > 1.2)
        throw std::runtime_error("fno auto-scale: no width within 20% of the reference count (got ratio " +
                                 std::to_string(ratio) + ")");
    return best_w;
}

/// Build entry point; seeds the weight init stream.
template <class Real>
Model<Real> build_backbone(BackboneSpec spec, uint64_t seed) {
    if (spec.kind == BackboneKind::fno && spec.width == 0) spec.width = auto_fno_width(spec);
    spec.validate();
    Rng rng(seed);
    switch (spec.kind) {
        case BackboneKind::unet: return build_unet<Real>(spec, rng);
        case BackboneKind::resnet:
        case BackboneKind::resnet_dilated: return build_resnet<Real>(spec, rng);
        case BackboneKind::fno: return build_fno<Real>(spec, rng);
    }
    throw std::logic_error("unreachable backbone kind");
}

}  // namespace acdm
