#include "asap/flops.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace asap::flops {

std::uint64_t CostBreakdown::total_flops() const {
  std::uint64_t t = 0;
  for (const auto& r : rows) t += r.flops;
  return t;
}

std::uint64_t CostBreakdown::total_params() const {
  std::uint64_t t = 0;
  for (const auto& r : rows) t += r.params;
  return t;
}

std::uint64_t CostBreakdown::flops_of(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r.flops;
  return 0;
}

void CostBreakdown::append(const CostBreakdown& other, const std::string& prefix) {
  for (auto r : other.rows) {
    r.name = prefix + r.name;
    rows.push_back(std::move(r));
  }
}

void VariantDims::validate() const {
  if (channels == 0 || reduced == 0 || height == 0 || width == 0) {
    throw ContractError("flops: dimensions must be positive");
  }
  if (reduced > channels) throw ContractError("flops: reduced channels exceed channels");
}

std::uint64_t flops_conv(std::uint64_t k, std::uint64_t c_in, std::uint64_t c_out,
                         std::uint64_t h_out, std::uint64_t w_out) {
  return 2 * k * k * c_in * c_out * h_out * w_out;
}

std::uint64_t flops_norm(std::uint64_t c, std::uint64_t h, std::uint64_t w) {
  return 4 * c * h * w;
}

namespace {

constexpr const char* kConvRef = "2*K^2*C_in*C_out*H_out*W_out";
constexpr const char* kNormRef = "4*C*H*W (mean, var, subtract, scale)";
constexpr std::uint64_t kBilinearPerOutput = 8;  // 4 multiply-adds

LayerCost conv_row(std::string name, std::uint64_t k, std::uint64_t c_in, std::uint64_t c_out,
                   std::uint64_t h, std::uint64_t w, bool bias) {
  return {std::move(name), flops_conv(k, c_in, c_out, h, w),
          k * k * c_in * c_out + (bias ? c_out : 0), kConvRef};
}

LayerCost norm_row(std::string name, std::uint64_t c, std::uint64_t h, std::uint64_t w) {
  return {std::move(name), flops_norm(c, h, w), 2 * c, kNormRef};
}

}  // namespace

CostBreakdown flops_attention(VariantKind kind, const VariantDims& d) {
  d.validate();
  const std::uint64_t C = d.channels, R = d.reduced, H = d.height, W = d.width;
  CostBreakdown b;
  switch (kind) {
    case VariantKind::attn_conventional: {
      const std::uint64_t n = H * W;
      b.rows.push_back(conv_row("query", 1, C, R, H, W, true));
      b.rows.push_back(conv_row("key", 1, C, R, H, W, false));
      b.rows.push_back(conv_row("value", 1, C, C, H, W, true));
      b.rows.push_back({"affinity", 2 * R * n * n, 0, "2*C_hat*(H*W)^2"});
      b.rows.push_back({"aggregation", 2 * C * n * n, 0, "2*C*(H*W)^2"});
      b.rows.push_back({"residual", C * H * W, 0, "C*H*W"});
      break;
    }
    case VariantKind::attn_vertical:
    case VariantKind::attn_horizontal: {
      // Positions attended: W after H x 1 pooling, H after 1 x W pooling.
      const std::uint64_t n = kind == VariantKind::attn_vertical ? W : H;
      const char* sq = kind == VariantKind::attn_vertical ? "W^2" : "H^2";
      b.rows.push_back({"pool", C * H * W, 0, "C*H*W"});
      b.rows.push_back(conv_row("query", 1, C, R, 1, n, true));
      b.rows.push_back(conv_row("key", 1, C, R, 1, n, false));
      b.rows.push_back(conv_row("value", 1, C, C, 1, n, true));
      b.rows.push_back({"affinity", 2 * R * n * n, 0, std::string("2*C_hat*") + sq});
      b.rows.push_back({"aggregation", 2 * C * n * n, 0, std::string("2*C*") + sq});
      b.rows.push_back({"tile_residual", C * H * W, 0, "C*H*W"});
      break;
    }
    default:
      throw ContractError("flops_attention: not an attention variant");
  }
  return b;
}

std::uint64_t attention_quadratic_flops(const CostBreakdown& attention) {
  return attention.flops_of("affinity") + attention.flops_of("aggregation");
}

CostBreakdown flops_fusion(VariantKind kind, const VariantDims& d) {
  if (kind != VariantKind::general_fusion && kind != VariantKind::ffdn) {
    throw ContractError("flops_fusion: not a fusion variant");
  }
  CostBreakdown b;
  if (d.levels == 0) return b;
  d.validate();
  const std::uint64_t C = d.channels, H = d.height, W = d.width;
  for (std::uint64_t i = 0; i < d.levels; ++i) {
    const std::uint64_t h = std::max<std::uint64_t>(1, H >> i);
    const std::uint64_t w = std::max<std::uint64_t>(1, W >> i);
    b.rows.push_back(conv_row("proj" + std::to_string(i + 1), 1, C, C, h, w, true));
    if (i > 0) {
      b.rows.push_back({"resize" + std::to_string(i + 1), kBilinearPerOutput * C * H * W, 0,
                        "8*C*H*W (bilinear)"});
    }
  }
  b.rows.push_back({"level_sum", (d.levels - 1) * C * H * W, 0, "(L-1)*C*H*W"});
  if (kind == VariantKind::ffdn) {
    b.rows.push_back(norm_row("layer_norm", C, H, W));
    b.rows.push_back(norm_row("instance_norm", C, H, W));
    b.rows.push_back({"branch_sum", C * H * W, 0, "C*H*W"});
  } else {
    b.rows.push_back(conv_row("context.conv", 1, C, C, H, W, false));
    b.rows.push_back(norm_row("context.bn", C, H, W));
    b.rows.push_back({"global_pool", C * H * W, 0, "C*H*W"});
    b.rows.push_back(conv_row("gate.conv", 1, C, C, 1, 1, false));
    b.rows.push_back(norm_row("gate.bn", C, 1, 1));
    b.rows.push_back({"reweight", C * H * W, 0, "C*H*W"});
  }
  return b;
}

std::string to_string(VariantKind kind) {
  switch (kind) {
    case VariantKind::general_fusion: return "general_fusion";
    case VariantKind::ffdn: return "ffdn";
    case VariantKind::attn_conventional: return "attn_conventional";
    case VariantKind::attn_horizontal: return "attn_horizontal";
    case VariantKind::attn_vertical: return "attn_vertical";
  }
  return "?";
}

OperatingPoint fit_operating_point(const Targets& t) {
  constexpr double giga = 1e9;
  auto err = [](double model, double target) { return std::abs(std::log(model / target)); };
  OperatingPoint best;
  best.max_log_error = 1e300;
  for (std::uint64_t h = 4; h <= 256; ++h) {
    const std::uint64_t w = 2 * h;
    VariantDims att_best{}, fus_best{};
    double att_err = 1e300, fus_err = 1e300;
    double conv_g = 0, vert_g = 0, gen_g = 0, ffdn_g = 0;
    for (std::uint64_t c = 8; c <= 2048; c += 8) {
      for (std::uint64_t div : {1, 2, 4, 8}) {
        const VariantDims d{c, c / div, h, w, 4};
        const double a = static_cast<double>(
                             flops_attention(VariantKind::attn_conventional, d).total_flops()) /
                         giga;
        const double v =
            static_cast<double>(flops_attention(VariantKind::attn_vertical, d).total_flops()) /
            giga;
        const double e = std::max(err(a, t.conventional), err(v, t.vertical));
        if (e < att_err) {
          att_err = e;
          att_best = d;
          conv_g = a;
          vert_g = v;
        }
      }
      if (c <= 1024) {
        const VariantDims d{c, c, h, w, 4};
        const double g =
            static_cast<double>(flops_fusion(VariantKind::general_fusion, d).total_flops()) / giga;
        const double f =
            static_cast<double>(flops_fusion(VariantKind::ffdn, d).total_flops()) / giga;
        const double e = std::max(err(g, t.general), err(f, t.ffdn));
        if (e < fus_err) {
          fus_err = e;
          fus_best = d;
          gen_g = g;
          ffdn_g = f;
        }
      }
    }
    const double e = std::max(att_err, fus_err);
    if (e < best.max_log_error) {
      best = {att_best, fus_best, conv_g, vert_g, gen_g, ffdn_g, e};
    }
  }
  return best;
}

CostBreakdown flops_report(const NetworkConfig& cfg, std::size_t height, std::size_t width) {
  if (height % 32 != 0 || width % 32 != 0) {
    throw ShapeError("flops_report: input must be a multiple of 32");
  }
  CostBreakdown b;
  const auto& ch = cfg.backbone.stage_channels;
  std::uint64_t h = height / 2, w = width / 2;
  b.rows.push_back(conv_row("backbone.stem.conv", 3, 3, ch[0], h, w, false));
  b.rows.push_back(norm_row("backbone.stem.bn", ch[0], h, w));
  std::uint64_t in = ch[0];
  std::array<std::uint64_t, 4> hs{}, ws{};
  for (std::size_t s = 0; s < 4; ++s) {
    h /= 2;
    w /= 2;
    hs[s] = h;
    ws[s] = w;
    const std::string p = "backbone.stage" + std::to_string(s + 1);
    const std::uint64_t c = ch[s];
    b.rows.push_back(conv_row(p + ".down.conv", 3, in, c, h, w, false));
    b.rows.push_back(norm_row(p + ".down.bn", c, h, w));
    for (std::size_t u = 1; u < cfg.backbone.blocks_per_stage; ++u) {
      const std::string q = p + ".unit" + std::to_string(u);
      b.rows.push_back(conv_row(q + ".a.conv", 3, c, c, h, w, false));
      b.rows.push_back(norm_row(q + ".a.bn", c, h, w));
      b.rows.push_back(conv_row(q + ".b.conv", 3, c, c, h, w, false));
      b.rows.push_back(norm_row(q + ".b.bn", c, h, w));
      b.rows.push_back({q + ".residual", c * h * w, 0, "C*H*W"});
    }
    in = c;
  }

  const std::uint64_t d = cfg.width;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "neck.p" + std::to_string(i + 1);
    b.rows.push_back(conv_row(p + ".lateral", 1, ch[i], d, hs[i], ws[i], true));
    if (i < 3) b.rows.push_back({p + ".topdown", d * hs[i] * ws[i], 0, "C*H*W"});
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "neck.p" + std::to_string(i + 1);
    b.rows.push_back(conv_row(p + ".refine.conv", 3, d, d, hs[i], ws[i], false));
    b.rows.push_back(norm_row(p + ".refine.bn", d, hs[i], ws[i]));
  }

  if (cfg.fusion != FusionMode::none) {
    CostBreakdown f = flops_fusion(VariantKind::ffdn, VariantDims{d, d, hs[0], ws[0], 4});
    std::erase_if(f.rows, [&](const LayerCost& r) {
      return (cfg.fusion == FusionMode::in_only && r.name == "layer_norm") ||
             (cfg.fusion == FusionMode::ln_only && r.name == "instance_norm") ||
             (cfg.fusion != FusionMode::ffdn && r.name == "branch_sum");
    });
    b.append(f, "ffdn.");
  }

  if (cfg.attention != AttentionMode::none) {
    const AttentionConfig ac{cfg.width, cfg.reduced_channels};
    const VariantDims ad{d, ac.reduced_channels(), hs[0], ws[0], 4};
    const auto kind = cfg.attention == AttentionMode::vertical ? VariantKind::attn_vertical
                                                               : VariantKind::attn_horizontal;
    b.append(flops_attention(kind, ad), "attention.");
  }

  b.rows.push_back(conv_row("head.block.conv", 3, d, d, hs[0], ws[0], false));
  b.rows.push_back(norm_row("head.block.bn", d, hs[0], ws[0]));
  b.rows.push_back(conv_row("head.classifier", 1, d, cfg.n_classes, hs[0], ws[0], true));
  b.rows.push_back({"head.resize", kBilinearPerOutput * cfg.n_classes * height * width, 0,
                    "8*K*H*W (bilinear)"});
  return b;
}

std::string to_tsv(const CostBreakdown& b) {
  std::ostringstream os;
  os << "name\tflops\tparams\tformula_ref\n";
  for (const auto& r : b.rows) {
    os << r.name << '\t' << r.flops << '\t' << r.params << '\t' << r.formula_ref << '\n';
  }
  os << "total\t" << b.total_flops() << '\t' << b.total_params() << "\tsum of rows\n";
  return os.str();
}

std::string to_text(const CostBreakdown& b) {
  std::size_t name_w = 5;
  for (const auto& r : b.rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w)) << "layer" << "  " << std::right
     << std::setw(16) << "flops" << "  " << std::setw(10) << "params" << "  formula\n";
  auto line = [&](const std::string& n, std::uint64_t f, std::uint64_t p, const std::string& ref) {
    os << std::left << std::setw(static_cast<int>(name_w)) << n << "  " << std::right
       << std::setw(16) << f << "  " << std::setw(10) << p << "  " << ref << '\n';
  };
  for (const auto& r : b.rows) line(r.name, r.flops, r.params, r.formula_ref);
  line("total", b.total_flops(), b.total_params(), "");
  return os.str();
}

}  // namespace asap::flops
