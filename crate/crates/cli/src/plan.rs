use flashsvd_core::factorizer::{param_threshold, HeadMode};
use flashsvd_core::geometry::rational_to_f64;
use flashsvd_core::planner::{
    decoder_memory, ffn_dominance_check, ffn_memory_ratio, flops_exact, io_bytes, memory_threshold, roofline_latency,
    speedup_formula, DecoderPhase, HardwareModel,
};
use flashsvd_core::{ExecMode, Rational};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

fn rational(r: &Rational, digits: usize) -> String {
    format!("{r} = {:.*}", digits, rational_to_f64(r))
}

pub fn run(s: &Settings, peak_flops: Option<f64>, beta: Option<f64>) -> CliResult<()> {
    let g = s.single_geometry()?;
    let hw = HardwareModel::new(peak_flops.unwrap_or(s.peak_flops), beta.unwrap_or(s.beta))?;
    let mode = s.head_mode();
    let (d, f, h, r) = (g.d_model, g.d_ff, g.heads, g.rank);

    let mut rows: Vec<(String, String, Value)> = Vec::new();
    let mut push = |key: &str, text: String, value: Value| rows.push((key.to_string(), text, value));

    push(
        "geometry",
        format!(
            "B={} M={} D_A={d} D_F={f} H={h} G={} r={r} L={}",
            g.batch, g.seq_len, g.groups, g.layers
        ),
        serde_json::to_value(g).unwrap_or(Value::Null),
    );
    for (label, m) in [
        ("multi_head", HeadMode::MultiHead),
        ("single_head", HeadMode::SingleHead),
        ("configured", mode),
    ] {
        let t = param_threshold(m, d, h);
        push(
            &format!("param_threshold.{label}"),
            rational(&t, 2),
            json!(rational_to_f64(&t)),
        );
        let mt = memory_threshold(&g, m);
        push(
            &format!("memory_threshold.{label}"),
            rational(&mt, 2),
            json!(rational_to_f64(&mt)),
        );
    }
    let below = Rational::from_integer(r as i128) < param_threshold(mode, d, h);
    push("compresses", if below { "yes" } else { "no" }.into(), json!(below));
    let sp = speedup_formula(d, f, r);
    push("speedup_formula", rational(&sp, 3), json!(rational_to_f64(&sp)));

    for (label, low_rank, exec) in [("dense", false, ExecMode::Dense), ("low_rank", true, ExecMode::FlashV1)] {
        let io = io_bytes(&g, low_rank);
        let layers = g.layers as u64;
        let (bytes, flops) = (io.total() * layers, flops_exact(&g, exec, &s.plan));
        push(
            &format!("io_bytes.{label}"),
            format!("in {} out {}", io.bytes_in * layers, io.bytes_out * layers),
            json!({"in": io.bytes_in * layers, "out": io.bytes_out * layers}),
        );
        push(&format!("flops_exact.{}", exec.id()), flops.to_string(), json!(flops));
        let t = roofline_latency(flops, bytes, &hw)?;
        push(&format!("roofline_seconds.{label}"), format!("{t:.6e}"), json!(t));
    }

    let prefill = decoder_memory(&g, DecoderPhase::Prefill)?;
    push("decoder_bytes.prefill", prefill.to_string(), json!(prefill));
    let step = decoder_memory(&g, DecoderPhase::DecodeStep(g.seq_len))?;
    push("decoder_bytes.decode_step_m", step.to_string(), json!(step));
    let dom = ffn_dominance_check(&g);
    push(
        "ffn_dominance",
        format!(
            "{} (ratio {})",
            if dom.dominates { "yes" } else { "no" },
            rational(&dom.ratio, 3)
        ),
        json!({"dominates": dom.dominates, "ratio": rational_to_f64(&dom.ratio)}),
    );
    let fr = ffn_memory_ratio(&g);
    push("ffn_memory_ratio", rational(&fr, 4), json!(rational_to_f64(&fr)));

    let width = rows.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    for (k, text, _) in &rows {
        println!("{k:<width$}  {text}");
    }
    if let Some(path) = &s.out {
        let doc: serde_json::Map<String, Value> = rows.into_iter().map(|(k, _, v)| (k, v)).collect();
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
