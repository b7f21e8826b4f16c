use super::config::BookNetConfig;
use crate::geometry::LOGIT_CHANNELS;

fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

fn attention(c: usize) -> usize {
    4 * (c * c + c)
}

fn ffn(c: usize, e: usize) -> usize {
    c * c * e + c * e + c * e * c + c
}

fn norm(c: usize) -> usize {
    2 * c
}

/// Learnable scalar count for `cfg`, summed layer by layer.
pub fn param_count(cfg: &BookNetConfig) -> usize {
    let c = cfg.channels;
    let e = cfg.ffn_expansion;
    let [c0, c1] = cfg.backbone_channels;
    let (fh, fw) = cfg.feature_grid();
    let (qh, qw) = cfg.query_grid();

    let stage = |c_in: usize, c_out: usize, blocks: usize| {
        let first = conv(c_in, c_out, 3) + conv(c_out, c_out, 3) + conv(c_in, c_out, 1);
        first + (blocks - 1) * 2 * conv(c_out, c_out, 3)
    };
    let backbone = conv(3, c0, 7) + stage(c0, c1, cfg.backbone_blocks[0]) + stage(c1, c, cfg.backbone_blocks[1]);

    let encoder = fh * fw * c + cfg.encoder_layers * (2 * norm(c) + attention(c) + ffn(c, e));

    let decoder_layer = 4 * norm(c) + 2 * attention(c) + ffn(c, e);
    let decoder = 2 * qh * qw * c + 2 * (cfg.decoder_layers[0] + cfg.decoder_layers[1]) * decoder_layer;

    let exchange = 2 * (attention(c) + norm(c));
    let fusion = 2 * conv(c, c, 3);
    let heads = 3 * (conv(c, 2, 3) + conv(c, LOGIT_CHANNELS, 1));

    backbone + encoder + decoder + exchange + fusion + heads
}
