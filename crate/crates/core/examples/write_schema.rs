// Regenerates schema/experiment.schema.json after config type changes:
// cargo run -p hamletbench --example write_schema
fn main() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/schema/experiment.schema.json");
    let s = serde_json::to_string_pretty(&hamletbench::harness::config_schema()).unwrap();
    std::fs::write(path, s + "\n").unwrap();
}
