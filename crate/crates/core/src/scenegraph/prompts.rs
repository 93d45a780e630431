//! Prompts sent to the generation and repair models.

/// Prompt for generating a scene graph from a person crop.
pub const GRAPH_GENERATION_PROMPT: &str = r#"Describe the detailed visual characteristics of the person in the photo that could be used to re-identify the person. Create a scene graph. Use the JSON format like in the example shown below and only output the JSON:
{
  "nodes": [
    { "id": "person", "attributes": ["...", "...", "..."] },
    { "id": "...", "attributes": ["...", "...", "..."] }
  ],
  "edges": [
    { "source": "...", "target": "...", "relation": "..." },
    { "source": "...", "target": "...", "relation": "..." }
  ]
}
Ensure nodes, attributes, and edges are well-structured. Ensure that the JSON is valid, and do not output additional information. In the output, use only English language. Nodes consist of an id and an attributes list. Edges consist of a source, a target, and a relation. Use only up to 1000 tokens."#;

/// Prompt template for language-model repair; `{graph}` is replaced by the
/// malformed document.
pub const FIX_GRAPH_PROMPT: &str = r#"Fix the JSON graph.
Example format:
{
  "nodes": [
    { "id": "person", "attributes": ["..."] }
  ],
  "edges": [
    { "source": "...", "target": "...", "relation": "..." }
  ]
}
Requirements:
- keep attributes
- remove redundancies
- Nodes: id + attributes list
- Edges: source/target/relation
- Only use one word per node/source/target/attribute
- Output only the valid revised JSON, and no explanation or notes
Text: {graph}"#;

pub fn fix_graph_prompt(graph: &str) -> String {
    FIX_GRAPH_PROMPT.replace("{graph}", graph)
}
