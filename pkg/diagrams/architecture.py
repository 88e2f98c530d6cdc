from graphviz import Digraph

from unimse.models import ModelConfig


def _table(title, rows, header_color, body_color):
    cells = "".join(f'<TR><TD ALIGN="LEFT">{k}</TD><TD ALIGN="LEFT">{v}</TD></TR>' for k, v in rows)
    return f'''<
        <TABLE BORDER="2" CELLBORDER="1" CELLSPACING="0" CELLPADDING="6" BGCOLOR="{body_color}">
            <TR><TD COLSPAN="2" BGCOLOR="{header_color}"><FONT COLOR="white"><B>{title}</B></FONT></TD></TR>
            {cells}
        </TABLE>
    >'''


def architecture_diagram(config: ModelConfig) -> Digraph:
    """One node per encoder/decoder layer; PMF layers highlighted, CL heads on the last n_cl of them"""
    dot = Digraph(comment='UniMSE architecture',
                  format='png',
                  graph_attr={
                      'rankdir': 'TB',
                      'nodesep': '0.6',
                      'ranksep': '0.6',
                      'bgcolor': 'white',
                      'fontname': 'Arial',
                      'fontsize': '14'
                  },
                  node_attr={
                      'shape': 'plain',
                      'fontname': 'Arial',
                      'fontsize': '11'
                  })

    dot.node('text', _table('text input', [('d_t', config.d_model), ('max length', config.max_source_length)],
                            'darkblue', 'lightblue'))
    fusion_from = config.n_encoder_layers - config.n_fusion
    cl_from = config.n_encoder_layers - config.n_cl
    if config.n_fusion:
        dot.node('acoustic', _table('acoustic LSTM', [('d_in', config.d_acoustic_in), ('d_a', config.d_acoustic)],
                                    'darkgreen', 'lightgreen'))
        dot.node('visual', _table('visual LSTM', [('d_in', config.d_visual_in), ('d_v', config.d_visual)],
                                  'darkgreen', 'lightgreen'))

    previous = 'text'
    for i in range(config.n_encoder_layers):
        name = f'encoder_{i}'
        fused = i >= fusion_from
        rows = [('heads', config.n_heads), ('d_ff', config.d_ff)]
        if fused:
            rows.append(('PMF bottleneck', config.bottleneck_width))
        dot.node(name, _table(f'encoder layer {i + 1}' + (' + PMF' if fused else ''), rows,
                              'darkred' if fused else 'gray', 'lightcoral' if fused else 'lightgray'))
        dot.edge(previous, name, penwidth='2')
        if fused:
            dot.edge('acoustic', name, label='last state', color='darkgreen', style='dashed')
            dot.edge('visual', name, label='last state', color='darkgreen', style='dashed')
        if fused and i >= cl_from:
            head = f'cl_{i}'
            dot.node(head, _table(f'CL head F({i - fusion_from + 1})',
                                  [('d_c', config.d_common), ('L_c', config.common_length)],
                                  'purple', 'lavender'))
            dot.edge(name, head, color='purple', arrowhead='normal')
        previous = name

    for i in range(config.n_decoder_layers):
        name = f'decoder_{i}'
        fused = config.decoder_pmf and i >= config.n_decoder_layers - config.n_fusion
        dot.node(name, _table(f'decoder layer {i + 1}' + (' + PMF' if fused else ''),
                              [('heads', config.n_heads), ('cross-attention', 'encoder')],
                              'darkred' if fused else 'orange', 'lightyellow'))
        dot.edge(previous, name, penwidth='2')
        previous = name

    dot.node('head', _table('universal label', [('tokens', 'polarity intensity emotion EOS')],
                            'black', 'white'))
    dot.edge(previous, 'head', penwidth='2')
    dot.attr(label=r'\n\nUniMSE encoder-decoder\nred = PMF adapter layers, purple = contrastive heads',
             fontsize='14')
    return dot


if __name__ == '__main__':
    diagram = architecture_diagram(ModelConfig())
    diagram.render('unimse_architecture', view=False, cleanup=True)
    print("Architecture diagram created: unimse_architecture.png")
