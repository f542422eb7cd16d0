//! Stand-alone matplotlib scripts written next to the data. Run them from
//! inside the output directory.

const PRELUDE: &str = "import csv\nimport matplotlib.pyplot as plt\n\n\ndef load(name):\n    with open(name) as f:\n        rows = list(csv.DictReader(f))\n    return {k: [float(r[k]) for r in rows] for k in rows[0]}\n\n\n";

fn list(names: &[&str]) -> String {
    let quoted: Vec<String> = names.iter().map(|n| format!("\"{n}\"")).collect();
    format!("[{}]", quoted.join(", "))
}

pub fn sample_prior(cases: &[&str]) -> String {
    format!(
        "{PRELUDE}for case in {cases}:\n    for field in (\"p\", \"m\"):\n        d = load(f\"{{case}}_{{field}}.csv\")\n        cols = [k for k in d if k.startswith(\"sample\")]\n        fig, axes = plt.subplots(1, len(cols), figsize=(4 * len(cols), 3), squeeze=False)\n        for ax, k in zip(axes[0], cols):\n            sc = ax.scatter(d[\"x\"], d[\"y\"], c=d[k], s=6, cmap=\"viridis\")\n            ax.set_aspect(\"equal\")\n            ax.set_title(f\"{{case}} {{field}} {{k}}\")\n            fig.colorbar(sc, ax=ax)\n        fig.tight_layout()\n        fig.savefig(f\"{{case}}_{{field}}.png\", dpi=150)\n",
        cases = list(cases)
    )
}

pub fn factor_compare(kinds: &[String]) -> String {
    let names: Vec<&str> = kinds.iter().map(String::as_str).collect();
    format!(
        "{PRELUDE}d = load(\"phi.csv\")\nfig, ax = plt.subplots(figsize=(6, 3))\nax.plot(d[\"x\"], d[\"target\"], \"k--\", label=\"target\")\nfor k in {kinds}:\n    ax.plot(d[\"x\"], d[f\"phi_{{k}}\"], label=k)\nax.set_xlabel(\"x\")\nax.set_ylabel(\"diag Phi\")\nax.legend()\nfig.tight_layout()\nfig.savefig(\"phi.png\", dpi=150)\n",
        kinds = list(&names)
    )
}

pub fn monod(scans: usize) -> String {
    format!(
        "{PRELUDE}import math\n\nfor k in range({scans}):\n    d = load(f\"grid_noise{{k}}.csv\")\n    cols = [c for c in d if c.startswith(\"log_post\")]\n    ps = sorted(set(d[\"p\"]))\n    ms = sorted(set(d[\"m\"]))\n    fig, axes = plt.subplots(1, len(cols), figsize=(3.2 * len(cols), 3), squeeze=False)\n    for ax, c in zip(axes[0], cols):\n        z = [[math.exp(d[c][i * len(ms) + j]) for i in range(len(ps))] for j in range(len(ms))]\n        ax.contourf(ps, ms, z, levels=20)\n        ax.plot([0.7], [65], \"r+\")\n        ax.set_title(c)\n    fig.tight_layout()\n    fig.savefig(f\"grid_noise{{k}}.png\", dpi=150)\n\nch = load(\"chain.csv\")\nfig, ax = plt.subplots(figsize=(4, 3))\nax.hist(ch[\"c\"], bins=50, range=(-1, 1))\nax.set_xlabel(\"c\")\nfig.tight_layout()\nfig.savefig(\"c_histogram.png\", dpi=150)\n"
    )
}

pub fn fields(runs: &[&str], piecewise: bool) -> String {
    let hist = if piecewise {
        "import os\n\nk = 0\nfig, ax = plt.subplots(figsize=(4, 3))\nwhile os.path.exists(f\"c{k}_histogram.csv\"):\n    h = load(f\"c{k}_histogram.csv\")\n    ax.step(h[\"lo\"], h[\"count\"], where=\"post\", label=f\"c{k + 1}\")\n    k += 1\nax.legend()\nfig.savefig(\"c_histograms.png\", dpi=150)\n"
    } else {
        "h = load(\"c_histogram.csv\")\nfig, ax = plt.subplots(figsize=(4, 3))\nax.step(h[\"lo\"], h[\"count\"], where=\"post\")\nax.set_xlabel(\"c\")\nfig.savefig(\"c_histogram.png\", dpi=150)\n"
    };
    format!(
        "{PRELUDE}d = load(\"fields.csv\")\nruns = {runs}\nfor field in (\"p\", \"m\"):\n    cols = [f\"truth_{{field}}\"] + [f\"{{r}}_mean_{{field}}\" for r in runs] + [f\"{{r}}_std_{{field}}\" for r in runs] + [f\"d_{{field}}\"]\n    fig, axes = plt.subplots(3, (len(cols) + 2) // 3, figsize=(12, 8), squeeze=False)\n    for ax, c in zip(axes.flat, cols):\n        sc = ax.scatter(d[\"x\"], d[\"y\"], c=d[c], s=8, cmap=\"viridis\")\n        ax.set_aspect(\"equal\")\n        ax.set_title(c)\n        fig.colorbar(sc, ax=ax)\n    fig.tight_layout()\n    fig.savefig(f\"fields_{{field}}.png\", dpi=150)\n\n{hist}",
        runs = list(runs)
    )
}
